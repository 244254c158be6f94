//! Crystal families and their space-group ranges.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CrystalFamily {
    Triclinic,
    Monoclinic,
    Orthorhombic,
    Tetragonal,
    Hexagonal,
    Cubic,
}

impl CrystalFamily {
    pub const ALL: [CrystalFamily; 6] = [
        CrystalFamily::Triclinic,
        CrystalFamily::Monoclinic,
        CrystalFamily::Orthorhombic,
        CrystalFamily::Tetragonal,
        CrystalFamily::Hexagonal,
        CrystalFamily::Cubic,
    ];

    /// Family containing `space_group`, or `None` outside 1..=230.
    pub fn from_space_group(space_group: u16) -> Option<Self> {
        use CrystalFamily::*;
        Some(match space_group {
            1..=2 => Triclinic,
            3..=15 => Monoclinic,
            16..=74 => Orthorhombic,
            75..=142 => Tetragonal,
            143..=194 => Hexagonal,
            195..=230 => Cubic,
            _ => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CrystalFamily::Triclinic => "Triclinic",
            CrystalFamily::Monoclinic => "Monoclinic",
            CrystalFamily::Orthorhombic => "Orthorhombic",
            CrystalFamily::Tetragonal => "Tetragonal",
            CrystalFamily::Hexagonal => "Hexagonal",
            CrystalFamily::Cubic => "Cubic",
        }
    }

    /// Inclusive space-group range of this family.
    pub fn space_groups(self) -> std::ops::RangeInclusive<u16> {
        match self {
            CrystalFamily::Triclinic => 1..=2,
            CrystalFamily::Monoclinic => 3..=15,
            CrystalFamily::Orthorhombic => 16..=74,
            CrystalFamily::Tetragonal => 75..=142,
            CrystalFamily::Hexagonal => 143..=194,
            CrystalFamily::Cubic => 195..=230,
        }
    }
}
