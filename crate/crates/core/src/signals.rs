//! The eleven per-word signals: six ERP components, four eye-tracking
//! measures, and self-paced reading time.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Signal {
    #[serde(rename = "ELAN")]
    Elan,
    #[serde(rename = "LAN")]
    Lan,
    #[serde(rename = "N400")]
    N400,
    #[serde(rename = "EPNP")]
    Epnp,
    #[serde(rename = "P600")]
    P600,
    #[serde(rename = "PNP")]
    Pnp,
    #[serde(rename = "FIX")]
    Fix,
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "GO")]
    Go,
    #[serde(rename = "RIGHT")]
    Right,
    #[serde(rename = "READ")]
    Read,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Erp,
    Eye,
    Reading,
}

impl Signal {
    /// All eleven signals in canonical order.
    pub const ALL: [Signal; 11] = [
        Signal::Elan,
        Signal::Lan,
        Signal::N400,
        Signal::Epnp,
        Signal::P600,
        Signal::Pnp,
        Signal::Fix,
        Signal::Pass,
        Signal::Go,
        Signal::Right,
        Signal::Read,
    ];

    /// The six ERP components, canonical order for the combination sweep.
    pub const ERP: [Signal; 6] = [
        Signal::Elan,
        Signal::Lan,
        Signal::N400,
        Signal::Epnp,
        Signal::P600,
        Signal::Pnp,
    ];

    /// The four eye-tracking measures.
    pub const EYE: [Signal; 4] = [Signal::Fix, Signal::Pass, Signal::Go, Signal::Right];

    pub fn kind(self) -> SignalKind {
        match self {
            Signal::Elan | Signal::Lan | Signal::N400 | Signal::Epnp | Signal::P600 | Signal::Pnp => {
                SignalKind::Erp
            }
            Signal::Fix | Signal::Pass | Signal::Go | Signal::Right => SignalKind::Eye,
            Signal::Read => SignalKind::Reading,
        }
    }

    /// Measurement window in ms after stimulus onset, for ERP components.
    pub fn window_ms(self) -> Option<(u32, u32)> {
        match self {
            Signal::Elan => Some((125, 175)),
            Signal::Lan => Some((300, 400)),
            Signal::N400 => Some((300, 500)),
            Signal::Epnp => Some((400, 600)),
            Signal::P600 => Some((500, 700)),
            Signal::Pnp => Some((600, 700)),
            _ => None,
        }
    }

    /// Durations (eye-tracking and self-paced reading) are log-transformed
    /// before standardization; ERP values are not.
    pub fn is_log_transformed(self) -> bool {
        self.kind() != SignalKind::Erp
    }

    pub fn name(self) -> &'static str {
        match self {
            Signal::Elan => "ELAN",
            Signal::Lan => "LAN",
            Signal::N400 => "N400",
            Signal::Epnp => "EPNP",
            Signal::P600 => "P600",
            Signal::Pnp => "PNP",
            Signal::Fix => "FIX",
            Signal::Pass => "PASS",
            Signal::Go => "GO",
            Signal::Right => "RIGHT",
            Signal::Read => "READ",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown signal name: {0}")]
pub struct UnknownSignal(pub String);

impl FromStr for Signal {
    type Err = UnknownSignal;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Signal::ALL
            .iter()
            .copied()
            .find(|sig| sig.name() == s)
            .ok_or_else(|| UnknownSignal(s.to_string()))
    }
}
