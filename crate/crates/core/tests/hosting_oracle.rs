//! Hosting plans checked against a direct byte-level simulation.

use bcov_core::hosting::{plan_hosting, GuestSite, HostSite, HostingFailure};

/// Simulates the layout a plan implies: the host's first five bytes hold its
/// own detour, each guest owns five bytes at its slot, no slot crosses the
/// host region and every guest's `jmp rel8` lands on its slot.
fn check_layout(guests: &[GuestSite], hosts: &[HostSite], host: usize, placed: &[(usize, u32)]) {
    let h = hosts.iter().find(|h| h.id == host).unwrap();
    let mut owner = vec![None; h.region as usize];
    for b in owner.iter_mut().take(5) {
        *b = Some(usize::MAX);
    }
    for &(gid, off) in placed {
        let g = guests.iter().find(|g| g.id == gid).unwrap();
        for b in off..off + 5 {
            let slot = owner.get_mut(b as usize).expect("slot inside host region");
            assert!(slot.is_none(), "overlapping slots");
            *slot = Some(gid);
        }
        let next = g.addr as i64 + 2;
        let rel = (h.addr + u64::from(off)) as i64 - next;
        assert!(i8::try_from(rel).is_ok(), "rel8 out of range");
    }
}

#[test]
fn three_clustered_guests_pack_one_host() {
    // 25-byte host followed by three 3-byte guests
    let hosts = [HostSite { id: 0, addr: 0x1000, region: 25, probed: true }];
    let guests = [
        GuestSite { id: 1, addr: 0x1019, size: 3 },
        GuestSite { id: 2, addr: 0x101c, size: 3 },
        GuestSite { id: 3, addr: 0x101f, size: 3 },
    ];
    let (allocs, fails) = plan_hosting(&guests, &hosts);
    assert!(fails.is_empty());
    assert_eq!(allocs.len(), 1);
    assert_eq!(allocs[0].slot_offsets, [5, 10, 15]);
    let placed: Vec<_> = allocs[0].guests.iter().copied().zip(allocs[0].slot_offsets.iter().copied()).collect();
    check_layout(&guests, &hosts, 0, &placed);
}

#[test]
fn host_capacity_is_respected() {
    // room for the host detour and two slots only
    let hosts = [HostSite { id: 0, addr: 0x1000, region: 15, probed: false }];
    let guests: Vec<_> = (0..3)
        .map(|i| GuestSite { id: i + 1, addr: 0x1010 + 3 * i as u64, size: 3 })
        .collect();
    let (allocs, fails) = plan_hosting(&guests, &hosts);
    assert_eq!(allocs[0].slot_offsets, [5, 10]);
    assert_eq!(fails, [HostingFailure::NoReachableHost(3)]);
}

#[test]
fn random_plans_are_consistent() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let mut addr = 0x4000u64;
        let mut hosts = Vec::new();
        let mut guests = Vec::new();
        for id in 0..rng.gen_range(2..30) {
            let size = rng.gen_range(1..40u32);
            if size < 5 {
                guests.push(GuestSite { id, addr, size });
            } else {
                hosts.push(HostSite { id, addr, region: size, probed: rng.gen_bool(0.5) });
            }
            addr += u64::from(size);
        }
        let (allocs, fails) = plan_hosting(&guests, &hosts);
        for a in &allocs {
            let placed: Vec<_> = a.guests.iter().copied().zip(a.slot_offsets.iter().copied()).collect();
            check_layout(&guests, &hosts, a.host, &placed);
        }
        let hosted: usize = allocs.iter().map(|a| a.guests.len()).sum();
        assert_eq!(hosted + fails.len(), guests.len());
        for f in &fails {
            if let HostingFailure::TooSmall(id) = f {
                assert_eq!(guests.iter().find(|g| g.id == *id).unwrap().size, 1);
            }
        }
    }
}
