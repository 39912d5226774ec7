use serde::{Deserialize, Serialize};

pub const NUM_LABELS: usize = 8;

/// Interaction type with stable integer codes `0..8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionLabel {
    Push,
    Posing,
    Grab,
    Hug,
    Kick,
    Handshake,
    HoldingHands,
    Hit,
}

impl InteractionLabel {
    pub const ALL: [Self; NUM_LABELS] =
        [Self::Push, Self::Posing, Self::Grab, Self::Hug, Self::Kick, Self::Handshake, Self::HoldingHands, Self::Hit];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Push => "push",
            Self::Posing => "posing",
            Self::Grab => "grab",
            Self::Hug => "hug",
            Self::Kick => "kick",
            Self::Handshake => "handshake",
            Self::HoldingHands => "holding-hands",
            Self::Hit => "hit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|l| l.name() == s || l.name().replace('-', "") == s)
    }
}

impl std::fmt::Display for InteractionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_stable_and_round_trip() {
        for (i, l) in InteractionLabel::ALL.into_iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(InteractionLabel::from_code(i), Some(l));
            assert_eq!(InteractionLabel::parse(l.name()), Some(l));
        }
        assert_eq!(InteractionLabel::from_code(8), None);
        assert_eq!(InteractionLabel::parse("holding_hands"), Some(InteractionLabel::HoldingHands));
        assert_eq!(InteractionLabel::parse("wave"), None);
        assert_eq!(serde_json::to_string(&InteractionLabel::HoldingHands).unwrap(), "\"holding-hands\"");
    }
}
