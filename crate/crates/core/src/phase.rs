use std::fmt;

/// Phase label of a three-phase system, ordered A, B, C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        match i {
            0 => Phase::A,
            1 => Phase::B,
            2 => Phase::C,
            _ => panic!("phase index out of range: {i}"),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s.trim() {
            "A" | "a" => Some(Phase::A),
            "B" | "b" => Some(Phase::B),
            "C" | "c" => Some(Phase::C),
            _ => None,
        }
    }

    /// Nominal phasor angle in radians for the direct (A, B, C) rotation.
    pub fn nominal_angle(self) -> f64 {
        let third = 2.0 * std::f64::consts::PI / 3.0;
        match self {
            Phase::A => 0.0,
            Phase::B => -third,
            Phase::C => third,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subset of the three phases present at a bus or device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSet {
    mask: u8,
}

impl PhaseSet {
    pub fn empty() -> Self {
        PhaseSet { mask: 0 }
    }

    pub fn all() -> Self {
        PhaseSet { mask: 0b111 }
    }

    pub fn single(ph: Phase) -> Self {
        PhaseSet {
            mask: 1 << ph.index(),
        }
    }

    pub fn insert(&mut self, ph: Phase) {
        self.mask |= 1 << ph.index();
    }

    pub fn contains(self, ph: Phase) -> bool {
        self.mask & (1 << ph.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.mask == 0
    }

    pub fn is_full(self) -> bool {
        self.mask == 0b111
    }

    pub fn len(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet {
            mask: self.mask & other.mask,
        }
    }

    /// Parses a compact phase string such as "A", "BC" or "ABC".
    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::empty();
        for c in s.trim().chars() {
            set.insert(Phase::parse(&c.to_string())?);
        }
        if set.is_empty() {
            None
        } else {
            Some(set)
        }
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for ph in self.iter() {
            write!(f, "{}", ph.letter())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_roundtrip() {
        for ph in Phase::ALL {
            assert_eq!(Phase::from_index(ph.index()), ph);
            assert_eq!(Phase::parse(&ph.letter().to_string()), Some(ph));
        }
    }

    #[test]
    fn phase_set_parse() {
        let set = PhaseSet::parse("AC").unwrap();
        assert!(set.contains(Phase::A));
        assert!(!set.contains(Phase::B));
        assert!(set.contains(Phase::C));
        assert_eq!(set.len(), 2);
        assert_eq!(set.to_string(), "AC");
        assert!(PhaseSet::parse("").is_none());
        assert!(PhaseSet::parse("AD").is_none());
    }

    #[test]
    fn nominal_angles_sum_to_zero_phasor() {
        use num_complex::Complex64;
        let sum: Complex64 = Phase::ALL
            .iter()
            .map(|p| Complex64::from_polar(1.0, p.nominal_angle()))
            .sum();
        assert!(sum.norm() < 1e-15);
    }
}
