use bcov_core::covdata::{
    decode_dump, encode_dump, merge, CovDataError, CoverageArray, CoverageHeader, Policy,
};
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = Policy> {
    prop_oneof![Just(Policy::LeafNode), Just(Policy::AnyNode)]
}

fn bits(len: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=1, len)
}

proptest! {
    #[test]
    fn roundtrip(p in policy(), hash in any::<u64>(), data in proptest::collection::vec(0u8..=1, 0..300)) {
        let h = CoverageHeader::new(p, data.len() as u32, hash);
        let bytes = encode_dump(&h, &CoverageArray(data.clone()));
        prop_assert_eq!(bytes.len(), 28 + data.len());
        let (h2, a2) = decode_dump(&bytes).unwrap();
        prop_assert_eq!(h2, h);
        prop_assert_eq!(a2.0, data);
    }

    #[test]
    fn merge_is_bitwise_or((a, b, c) in (1usize..200).prop_flat_map(|n| (bits(n), bits(n), bits(n)))) {
        let h = CoverageHeader::new(Policy::AnyNode, a.len() as u32, 42);
        let d = |v: &Vec<u8>| (h, CoverageArray(v.clone()));
        let abc = merge(&[d(&a), d(&b), d(&c)]).unwrap().1;
        let cba = merge(&[d(&c), d(&b), d(&a)]).unwrap().1;
        let ab = merge(&[d(&a), d(&b)]).unwrap();
        let ab_c = merge(&[ab, d(&c)]).unwrap().1;
        prop_assert_eq!(&abc, &cba);
        prop_assert_eq!(&abc, &ab_c);
        for i in 0..a.len() {
            prop_assert_eq!(abc.0[i], a[i] | b[i] | c[i]);
        }
        // idempotent
        prop_assert_eq!(merge(&[d(&a), d(&a)]).unwrap().1.0, a);
    }

    #[test]
    fn truncated_dumps_are_rejected(n in 1usize..100, cut in 0usize..128) {
        let h = CoverageHeader::new(Policy::LeafNode, n as u32, 1);
        let bytes = encode_dump(&h, &CoverageArray::zeroed(n));
        let cut = cut.min(bytes.len() - 1);
        let err = decode_dump(&bytes[..cut]).unwrap_err();
        let ok = matches!(err, CovDataError::BadMagic | CovDataError::Truncated { .. });
        prop_assert!(ok);
    }
}

#[test]
fn merge_rejects_different_builds() {
    let a = (CoverageHeader::new(Policy::AnyNode, 3, 1), CoverageArray::zeroed(3));
    let b = (CoverageHeader::new(Policy::AnyNode, 3, 2), CoverageArray::zeroed(3));
    assert_eq!(merge(&[a, b]).unwrap_err(), CovDataError::HeaderMismatch);
    assert_eq!(merge(&[]).unwrap_err(), CovDataError::Empty);
}
