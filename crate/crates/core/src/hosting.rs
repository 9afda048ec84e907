//! Greedy detour hosting.
//!
//! A guest block is too short for a 5-byte detour but can hold a 2-byte
//! `jmp rel8` to a slot inside a larger neighbouring host block. The host
//! keeps its own detour in its first five bytes; guest slots follow at
//! offsets 5, 10, 15, ...
//!
//! Guests are placed one at a time. Among the hosts within rel8 reach the
//! planner prefers, in order: the highest offered slot offset (packing more
//! guests into one host), a host that is already probed, the closest host.

use alloc::vec::Vec;

use crate::probe::{DETOUR_SIZE, SHORT_DETOUR_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuestSite {
    pub id: usize,
    pub addr: u64,
    pub size: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HostSite {
    pub id: usize,
    pub addr: u64,
    /// Block bytes plus padding.
    pub region: u32,
    /// The host already carries its own probe.
    pub probed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostAllocation {
    pub host: usize,
    pub guests: Vec<usize>,
    pub slot_offsets: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostingFailure {
    /// One-byte guests cannot hold a short jump.
    TooSmall(usize),
    NoReachableHost(usize),
}

/// Whether a `jmp rel8` placed at `from` can reach `to`.
pub fn rel8_reaches(from: u64, to: u64) -> bool {
    let next = from.wrapping_add(u64::from(SHORT_DETOUR_SIZE)) as i64;
    let delta = (to as i64).wrapping_sub(next);
    (-128..=127).contains(&delta)
}

/// Incremental greedy placement; guests are placed in call order and never
/// moved afterwards.
#[derive(Clone, Debug)]
pub struct Hosting<'a> {
    hosts: &'a [HostSite],
    /// Host indices sorted by address.
    order: Vec<usize>,
    max_region: u32,
    used: Vec<u32>,
    allocations: Vec<HostAllocation>,
    /// Allocation index per host index.
    slot_of: Vec<Option<usize>>,
    /// Hosts that accept no further guests.
    frozen: Vec<bool>,
    /// Host indices sorted by id.
    by_id: Vec<usize>,
}

impl<'a> Hosting<'a> {
    pub fn new(hosts: &'a [HostSite]) -> Self {
        let mut order: Vec<usize> = (0..hosts.len()).collect();
        order.sort_by_key(|&i| hosts[i].addr);
        let mut by_id: Vec<usize> = (0..hosts.len()).collect();
        by_id.sort_by_key(|&i| hosts[i].id);
        Hosting {
            hosts,
            order,
            max_region: hosts.iter().map(|h| h.region).max().unwrap_or(0),
            used: alloc::vec![0; hosts.len()],
            allocations: Vec::new(),
            slot_of: alloc::vec![None; hosts.len()],
            frozen: alloc::vec![false; hosts.len()],
            by_id,
        }
    }

    fn index_of(&self, host_id: usize) -> Option<usize> {
        self.by_id
            .binary_search_by_key(&host_id, |&i| self.hosts[i].id)
            .ok()
            .map(|k| self.by_id[k])
    }

    /// Guests placed in `host_id` so far, or `None` if it is not a host.
    pub fn guests_in(&self, host_id: usize) -> Option<u32> {
        self.index_of(host_id).map(|i| self.used[i])
    }

    /// Stops `host_id` from taking further guests.
    pub fn freeze(&mut self, host_id: usize) {
        if let Some(i) = self.index_of(host_id) {
            self.frozen[i] = true;
        }
    }

    /// Places `guest`, returning the chosen host id and slot offset.
    pub fn place(&mut self, guest: &GuestSite) -> Result<(usize, u32), HostingFailure> {
        if guest.size < SHORT_DETOUR_SIZE {
            return Err(HostingFailure::TooSmall(guest.id));
        }
        // a host can only offer a slot if it starts within this window
        let lo = guest.addr.saturating_sub(128 + u64::from(self.max_region));
        let hi = guest.addr + 130;
        let first = self.order.partition_point(|&i| self.hosts[i].addr < lo);
        // (offset, probed, distance, addr, host index)
        let mut best: Option<(u32, bool, u64, u64, usize)> = None;
        for &hi_idx in &self.order[first..] {
            let host = &self.hosts[hi_idx];
            if host.addr > hi {
                break;
            }
            if host.id == guest.id || self.frozen[hi_idx] {
                continue;
            }
            let used = self.used[hi_idx];
            let offset = DETOUR_SIZE + DETOUR_SIZE * used;
            if offset + DETOUR_SIZE > host.region {
                continue;
            }
            let slot = host.addr + u64::from(offset);
            if !rel8_reaches(guest.addr, slot) {
                continue;
            }
            let selected = host.probed || used > 0;
            let distance = host.addr.abs_diff(guest.addr);
            let better = match best {
                None => true,
                Some((bo, bp, bd, ba, _)) => {
                    (offset, selected, core::cmp::Reverse(distance), core::cmp::Reverse(host.addr))
                        > (bo, bp, core::cmp::Reverse(bd), core::cmp::Reverse(ba))
                }
            };
            if better {
                best = Some((offset, selected, distance, host.addr, hi_idx));
            }
        }
        let (offset, _, _, _, hi_idx) = best.ok_or(HostingFailure::NoReachableHost(guest.id))?;
        self.used[hi_idx] += 1;
        let host_id = self.hosts[hi_idx].id;
        match self.slot_of[hi_idx] {
            Some(a) => {
                self.allocations[a].guests.push(guest.id);
                self.allocations[a].slot_offsets.push(offset);
            }
            None => {
                self.slot_of[hi_idx] = Some(self.allocations.len());
                self.allocations.push(HostAllocation {
                    host: host_id,
                    guests: alloc::vec![guest.id],
                    slot_offsets: alloc::vec![offset],
                });
            }
        }
        Ok((host_id, offset))
    }

    /// Allocations in order of first use.
    pub fn allocations(&self) -> &[HostAllocation] {
        &self.allocations
    }

    pub fn into_allocations(self) -> Vec<HostAllocation> {
        self.allocations
    }
}

pub fn plan_hosting(
    guests: &[GuestSite],
    hosts: &[HostSite],
) -> (Vec<HostAllocation>, Vec<HostingFailure>) {
    let mut state = Hosting::new(hosts);
    let failures = guests.iter().filter_map(|g| state.place(g).err()).collect();
    (state.into_allocations(), failures)
}
