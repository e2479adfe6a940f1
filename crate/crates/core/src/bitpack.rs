//! LSB-first packing of fixed-width unsigned integers.
//!
//! Value `i` occupies bits `[i*k, (i+1)*k)` of a little-endian bit stream:
//! bit `b` is bit `b % 8` of byte `b / 8`.

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs `values` at `bits` per value. Values must fit in `bits`.
pub fn pack(values: &[u16], bits: u32) -> Vec<u8> {
    assert!((1..=16).contains(&bits), "pack width {bits} out of range");
    let mut out = Vec::with_capacity(packed_len(values.len(), bits));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mask = (1u64 << bits) - 1;
    for &v in values {
        debug_assert!((v as u64) <= mask, "value {v} exceeds {bits} bits");
        acc |= (v as u64 & mask) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

/// Calls `f(i, value)` for the first `count` values of `bytes`.
///
/// Panics if `bytes` is shorter than `packed_len(count, bits)`.
pub fn for_each_unpacked(bytes: &[u8], bits: u32, count: usize, mut f: impl FnMut(usize, u16)) {
    assert!((1..=16).contains(&bits), "unpack width {bits} out of range");
    assert!(bytes.len() >= packed_len(count, bits), "packed buffer too short");
    let mask = (1u64 << bits) - 1;
    let mut acc: u64 = 0;
    let mut avail: u32 = 0;
    let mut src = bytes.iter();
    for i in 0..count {
        while avail < bits {
            // length checked above
            acc |= (*src.next().unwrap() as u64) << avail;
            avail += 8;
        }
        f(i, (acc & mask) as u16);
        acc >>= bits;
        avail -= bits;
    }
}

pub fn unpack(bytes: &[u8], bits: u32, count: usize) -> Vec<u16> {
    let mut out = vec![0u16; count];
    for_each_unpacked(bytes, bits, count, |i, v| out[i] = v);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bit_layout() {
        // 0b11_10_01_00 -> values 0,1,2,3 in one byte
        assert_eq!(pack(&[0, 1, 2, 3], 2), vec![0b1110_0100]);
        assert_eq!(pack(&[3], 2), vec![0b11]);
        assert_eq!(packed_len(5, 3), 2);
        assert_eq!(packed_len(0, 7), 0);
    }

    proptest! {
        #[test]
        fn round_trip(bits in 1u32..=16, raw in proptest::collection::vec(any::<u16>(), 0..300)) {
            let mask = ((1u32 << bits) - 1) as u16;
            let values: Vec<u16> = raw.iter().map(|v| v & mask).collect();
            let packed = pack(&values, bits);
            prop_assert_eq!(packed.len(), packed_len(values.len(), bits));
            prop_assert_eq!(unpack(&packed, bits, values.len()), values);
        }
    }
}
