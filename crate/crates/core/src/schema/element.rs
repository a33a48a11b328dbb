use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// IUPAC symbols, indexed by atomic number minus one.
const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Number of elements in the embedded periodic table.
pub const N_ELEMENTS: usize = SYMBOLS.len();

/// A chemical element, stored by atomic number.
///
/// Parsing is exact: `"Fe"` is accepted, `"FE"` and `"fe"` are not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementSymbol(u8);

impl ElementSymbol {
    pub fn from_atomic_number(z: u8) -> Option<ElementSymbol> {
        if (1..=N_ELEMENTS as u8).contains(&z) {
            Some(ElementSymbol(z))
        } else {
            None
        }
    }

    pub fn parse(symbol: &str) -> Option<ElementSymbol> {
        SYMBOLS
            .iter()
            .position(|&s| s == symbol)
            .map(|i| ElementSymbol(i as u8 + 1))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    /// Zero-based position in the element table, used for bit signatures.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ElementSymbol> {
        (1..=N_ELEMENTS as u8).map(ElementSymbol)
    }
}

impl fmt::Display for ElementSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown element symbol '{0}'")]
pub struct UnknownElement(pub String);

impl FromStr for ElementSymbol {
    type Err = UnknownElement;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ElementSymbol::parse(s).ok_or_else(|| UnknownElement(s.to_string()))
    }
}

impl Serialize for ElementSymbol {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for ElementSymbol {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_complete_and_unique() {
        assert_eq!(N_ELEMENTS, 118);
        let mut seen = std::collections::HashSet::new();
        for s in SYMBOLS {
            assert!(seen.insert(s), "duplicate symbol {s}");
        }
        assert_eq!(ElementSymbol::parse("Og").unwrap().atomic_number(), 118);
        assert_eq!(ElementSymbol::parse("Fe").unwrap().atomic_number(), 26);
    }

    #[test]
    fn capitalization_is_canonical() {
        assert!(ElementSymbol::parse("FE").is_none());
        assert!(ElementSymbol::parse("fe").is_none());
        assert!(ElementSymbol::parse("Xx").is_none());
        assert_eq!(ElementSymbol::parse("Yb").unwrap().symbol(), "Yb");
        assert_ne!(ElementSymbol::parse("Y"), ElementSymbol::parse("Yb"));
    }

    #[test]
    fn serde_uses_symbols() {
        let fe: ElementSymbol = serde_json::from_str("\"Fe\"").unwrap();
        assert_eq!(serde_json::to_string(&fe).unwrap(), "\"Fe\"");
        assert!(serde_json::from_str::<ElementSymbol>("\"FE\"").is_err());
    }
}
