//! Bit-exact communication accounting.

use serde::{Deserialize, Serialize};

use super::StrategyKind;

/// Bits of one 32-bit float.
pub const FLOAT_BITS: u64 = 32;

/// `⌈log2(x)⌉` for `x >= 1`.
pub fn ceil_log2(x: u64) -> u64 {
    assert!(x >= 1, "ceil_log2 of zero");
    (u64::BITS - (x - 1).leading_zeros()) as u64
}

/// Bits charged for one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charge {
    /// Upload of a single participating client.
    pub uplink_per_client: u64,
    /// Sum over participants.
    pub uplink: u64,
    /// One broadcast, received by every client.
    pub downlink: u64,
}

/// Charges for a round of `kind` over a model with `n` weights in `l`
/// weighted layers and `participants` uploaders.
///
/// Real-valued exchanges cost `32N` each way. Binary uploads cost `N`
/// sign bits plus `32L` for the layer amplitudes. The server broadcast of a
/// binary aggregate costs `⌈log2(P + 1)⌉·N + 32L` when all uploaders hold
/// equal shards (one lattice index per parameter), `32N + 32L` otherwise,
/// and `N + 32L` when only its sign is sent.
pub fn ledger_charge(
    kind: StrategyKind,
    n: u64,
    l: u64,
    participants: u64,
    equal_shards: bool,
) -> Charge {
    let amplitudes = FLOAT_BITS * l;
    let (per_client, downlink) = match kind {
        StrategyKind::FaReal | StrategyKind::Full => (FLOAT_BITS * n, FLOAT_BITS * n),
        StrategyKind::UpOnly | StrategyKind::BiMl => {
            let per_param = if equal_shards {
                ceil_log2(participants + 1)
            } else {
                FLOAT_BITS
            };
            (n + amplitudes, per_param * n + amplitudes)
        }
        StrategyKind::UpDown => (n + amplitudes, n + amplitudes),
    };
    Charge {
        uplink_per_client: per_client,
        uplink: per_client * participants,
        downlink,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub strategy: StrategyKind,
    pub participants: u64,
    pub uplink_per_client: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub uplink_bits_cum: u64,
    pub downlink_bits_cum: u64,
}

/// Per-round charges with running totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rows: Vec<LedgerRow>,
}

impl CommLedger {
    pub fn record(
        &mut self,
        round: usize,
        strategy: StrategyKind,
        participants: u64,
        charge: Charge,
    ) -> &LedgerRow {
        let (up, down) = self.totals();
        self.rows.push(LedgerRow {
            round,
            strategy,
            participants,
            uplink_per_client: charge.uplink_per_client,
            uplink_bits: charge.uplink,
            downlink_bits: charge.downlink,
            uplink_bits_cum: up + charge.uplink,
            downlink_bits_cum: down + charge.downlink,
        });
        self.rows.last().expect("just pushed")
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    /// Cumulative `(uplink, downlink)` bits.
    pub fn totals(&self) -> (u64, u64) {
        self.rows
            .last()
            .map_or((0, 0), |r| (r.uplink_bits_cum, r.downlink_bits_cum))
    }

    /// True when every cumulative column equals the sum of the rounds so far.
    pub fn is_conserved(&self) -> bool {
        let (mut up, mut down) = (0u64, 0u64);
        self.rows.iter().all(|r| {
            up += r.uplink_bits;
            down += r.downlink_bits;
            r.uplink_bits_cum == up && r.downlink_bits_cum == down
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(11), 4);
        assert_eq!(ceil_log2(101), 7);
        assert_eq!(ceil_log2(128), 7);
        assert_eq!(ceil_log2(129), 8);
    }

    #[test]
    fn uplink_ratio_is_32_without_amplitudes() {
        let n = 1_000_000;
        let fa = ledger_charge(StrategyKind::FaReal, n, 0, 100, true);
        let bi = ledger_charge(StrategyKind::BiMl, n, 0, 100, true);
        assert_eq!(fa.uplink_per_client, 32 * bi.uplink_per_client);
        assert_eq!(bi.downlink, 7 * n);
    }

    #[test]
    fn binary_uplink_includes_amplitudes() {
        for kind in [
            StrategyKind::UpOnly,
            StrategyKind::UpDown,
            StrategyKind::BiMl,
        ] {
            let c = ledger_charge(kind, 1000, 3, 10, true);
            assert_eq!(c.uplink_per_client, 1000 + 96);
            assert_eq!(c.uplink, 10 * 1096);
        }
        assert_eq!(
            ledger_charge(StrategyKind::UpDown, 1000, 3, 10, true).downlink,
            1096
        );
        assert_eq!(
            ledger_charge(StrategyKind::BiMl, 1000, 3, 10, false).downlink,
            32_096
        );
    }

    #[test]
    fn ledger_totals_are_conserved() {
        let mut l = CommLedger::default();
        for r in 1..=5 {
            l.record(
                r,
                StrategyKind::BiMl,
                4,
                ledger_charge(StrategyKind::BiMl, 50, 2, 4, true),
            );
        }
        assert!(l.is_conserved());
        assert_eq!(l.totals(), (5 * 4 * 114, 5 * (3 * 50 + 64)));
    }
}
