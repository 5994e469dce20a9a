//! Per-coordinate keep/pruned bits. A pruned coordinate never comes back.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    alive: Vec<bool>,
}

impl Mask {
    pub fn all_alive(len: usize) -> Self {
        Self {
            alive: vec![true; len],
        }
    }

    pub fn from_bits(alive: Vec<bool>) -> Self {
        Self { alive }
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.alive[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.alive
    }

    /// Marks coordinate `i` as pruned. Returns `true` if it was alive.
    pub fn prune(&mut self, i: usize) -> bool {
        std::mem::replace(&mut self.alive[i], false)
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.len() - self.alive_count()
    }

    /// Sets every pruned coordinate of `values` to exactly `0.0`.
    pub fn apply(&self, values: &mut [f64]) {
        for (v, &a) in values.iter_mut().zip(&self.alive) {
            if !a {
                *v = 0.0;
            }
        }
    }

    /// True when every coordinate alive here is also alive in `earlier`.
    pub fn is_subset_of(&self, earlier: &Mask) -> bool {
        self.len() == earlier.len()
            && self
                .alive
                .iter()
                .zip(&earlier.alive)
                .all(|(&now, &before)| !now || before)
    }

    /// Packs the bits LSB-first, eight coordinates per byte.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.alive.len().div_ceil(8)];
        for (i, &a) in self.alive.iter().enumerate() {
            if a {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let alive = (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Some(Self { alive })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prune_is_one_way() {
        let mut m = Mask::all_alive(3);
        assert!(m.prune(1));
        assert!(!m.prune(1));
        assert_eq!(m.alive_count() + m.pruned_count(), 3);
        let mut v = [1.0, -2.0, 3.0];
        m.apply(&mut v);
        assert_eq!(v, [1.0, 0.0, 3.0]);
        assert!(m.is_subset_of(&Mask::all_alive(3)));
        assert!(!Mask::all_alive(3).is_subset_of(&m));
    }

    proptest! {
        #[test]
        fn packing_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = Mask::from_bits(bits.clone());
            let packed = m.to_packed();
            prop_assert_eq!(Mask::from_packed(&packed, bits.len()), Some(m));
        }
    }
}
