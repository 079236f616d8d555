//! Closed-form parameter and memory accounting.
//!
//! Shared fixed matrices are stored once and counted once toward the total.
//! The "as if unshared" figure counts them once per layer that uses them.
//! Memory is reported with ternary weights at log₂3 bits and every
//! full-precision tensor at 16 bits.

use std::fmt::Write as _;

use crate::layers::{ModelConfig, Variant};
use crate::ternary::trit_memory_bits;

pub const FULLPREC_REPORT_BITS: u64 = 16;
pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub embedding: u64,
    /// Trainable MLGRU matrices and biases across all blocks.
    pub mixer: u64,
    /// GLU matrices across all blocks.
    pub channel: u64,
    /// Block and final RMSNorm gains.
    pub norms: u64,
    pub gamma: u64,
    pub head: u64,
    /// Shared fixed matrices, stored once.
    pub fixed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub variant: Variant,
    pub total_params: u64,
    pub trainable_params: u64,
    pub fixed_params: u64,
    /// Total with each shared matrix counted once per layer that reads it.
    pub unshared_total_params: u64,
    pub ternary_params: u64,
    pub fullprec_params: u64,
    pub breakdown: Breakdown,
}

/// Number of d×d matrices per layer that are replaced by shared fixed ones.
fn shared_roles(variant: Variant) -> u64 {
    match variant {
        Variant::Base => 0,
        Variant::Rc => 2,
        Variant::Grc => 4,
    }
}

pub fn count_params(config: &ModelConfig) -> ParamReport {
    let d = config.d as u64;
    let n = config.n_layers as u64;
    let v = config.vocab as u64;
    let l = config.glu_dim as u64;
    let dd = d * d;
    let trainable_gates: u64 = match config.variant {
        Variant::Base => 4,
        Variant::Rc => 3,
        Variant::Grc => 1,
    };
    // W_r has no trainable counterpart in the base model, hence roles − (4 − trainable)
    let fixed = if n == 0 { 0 } else { shared_roles(config.variant) * dd };
    let breakdown = Breakdown {
        embedding: v * d,
        mixer: n * (trainable_gates * dd + 4 * d),
        channel: n * 3 * d * l,
        norms: 2 * n * d + d,
        gamma: n * d,
        head: v * d,
        fixed,
    };
    let b = &breakdown;
    let trainable = b.embedding + b.mixer + b.channel + b.norms + b.gamma + b.head;
    let fullprec = b.embedding + n * 4 * d + b.norms + b.gamma;
    let total = trainable + fixed;
    ParamReport {
        variant: config.variant,
        total_params: total,
        trainable_params: trainable,
        fixed_params: fixed,
        unshared_total_params: trainable + n * shared_roles(config.variant) * dd,
        ternary_params: total - fullprec,
        fullprec_params: fullprec,
        breakdown,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryReport {
    pub ternary_bits: f64,
    pub fullprec_bits: f64,
    pub embedding_bits: f64,
}

impl MemoryReport {
    pub fn total_bits(&self) -> f64 {
        self.ternary_bits + self.fullprec_bits
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits() / 8.0
    }

    pub fn embedding_bytes(&self) -> f64 {
        self.embedding_bits / 8.0
    }

    pub fn total_mib(&self) -> f64 {
        self.total_bytes() / MIB
    }

    pub fn embedding_mib(&self) -> f64 {
        self.embedding_bytes() / MIB
    }
}

pub fn memory_report(config: &ModelConfig) -> MemoryReport {
    let p = count_params(config);
    MemoryReport {
        ternary_bits: trit_memory_bits(p.ternary_params),
        fullprec_bits: (p.fullprec_params * FULLPREC_REPORT_BITS) as f64,
        embedding_bits: (p.breakdown.embedding * FULLPREC_REPORT_BITS) as f64,
    }
}

fn millions(x: u64) -> f64 {
    x as f64 / 1e6
}

impl ParamReport {
    /// Aligned human-readable table.
    pub fn to_text(&self, config: &ModelConfig) -> String {
        let m = memory_report(config);
        let b = &self.breakdown;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "variant {}  d={} N={} vocab={} glu_dim={}",
            self.variant, config.d, config.n_layers, config.vocab, config.glu_dim
        );
        let rows = [
            ("embedding", b.embedding),
            ("mlgru (trainable)", b.mixer),
            ("glu", b.channel),
            ("norm gains", b.norms),
            ("gamma", b.gamma),
            ("head", b.head),
            ("fixed (shared)", b.fixed),
        ];
        for (name, v) in rows {
            let _ = writeln!(s, "  {name:<20}{v:>14}  {:>10.3} M", millions(v));
        }
        let totals = [
            ("total", self.total_params),
            ("trainable", self.trainable_params),
            ("fixed", self.fixed_params),
            ("total if unshared", self.unshared_total_params),
            ("ternary", self.ternary_params),
            ("full precision", self.fullprec_params),
        ];
        for (name, v) in totals {
            let _ = writeln!(s, "  {name:<20}{v:>14}  {:>10.3} M", millions(v));
        }
        let _ = writeln!(
            s,
            "  memory              {:>14.0}  {:>10.3} MiB (embedding {:.3} MiB; trits at log2(3) bits, others at {FULLPREC_REPORT_BITS} bits)",
            m.total_bytes(),
            m.total_mib(),
            m.embedding_mib()
        );
        let (d2, n) = ((config.d * config.d) as f64 / 1e6, config.n_layers as f64);
        let _ = writeln!(
            s,
            "  deltas: base-rc = (N-2)d^2 = {:.3} M, rc-grc = 2(N-1)d^2 = {:.3} M",
            (n - 2.0) * d2,
            2.0 * (n - 1.0) * d2
        );
        s
    }

    pub const CSV_HEADER: &'static str =
        "variant,d,n_layers,vocab,glu_dim,total,trainable,fixed,unshared_total,ternary,fullprec,embedding,mixer,channel,norms,gamma,head,memory_bytes,memory_mib,embedding_mib";

    pub fn to_csv_row(&self, config: &ModelConfig) -> String {
        let m = memory_report(config);
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.1},{:.6},{:.6}",
            self.variant,
            config.d,
            config.n_layers,
            config.vocab,
            config.glu_dim,
            self.total_params,
            self.trainable_params,
            self.fixed_params,
            self.unshared_total_params,
            self.ternary_params,
            self.fullprec_params,
            b.embedding,
            b.mixer,
            b.channel,
            b.norms,
            b.gamma,
            b.head,
            m.total_bytes(),
            m.total_mib(),
            m.embedding_mib()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scale_deltas() {
        let base = count_params(&ModelConfig::reference_scale(Variant::Base));
        let rc = count_params(&ModelConfig::reference_scale(Variant::Rc));
        let grc = count_params(&ModelConfig::reference_scale(Variant::Grc));
        let dd = 1024u64 * 1024;
        assert_eq!(base.total_params - rc.total_params, 22 * dd);
        assert_eq!(rc.total_params - grc.total_params, 2 * 23 * dd);
        assert_eq!(rc.fixed_params, 2 * dd);
        assert_eq!(grc.fixed_params, 4 * dd);
        assert_eq!(base.total_params, 368_092_160);
    }

    #[test]
    fn unshared_view() {
        let cfg = ModelConfig::tiny(Variant::Grc);
        let p = count_params(&cfg);
        let base = count_params(&cfg.with_variant(Variant::Base));
        // grc with every layer owning its fixed matrices: base + one W_r per layer
        assert_eq!(p.unshared_total_params, base.total_params + 2 * 16);
    }

    #[test]
    fn zero_layers() {
        let mut cfg = ModelConfig::tiny(Variant::Grc);
        cfg.n_layers = 0;
        let p = count_params(&cfg);
        assert_eq!(p.total_params, 2 * 8 * 4 + 4);
        assert_eq!(p.fixed_params, 0);
        let m = memory_report(&cfg);
        assert_eq!(m.fullprec_bits, ((8 * 4 + 4) * 16) as f64);
        assert!((m.ternary_bits - 32.0 * 3f64.log2()).abs() < 1e-9);
    }

    #[test]
    fn text_and_csv_render() {
        let cfg = ModelConfig::tiny(Variant::Rc);
        let p = count_params(&cfg);
        assert!(p.to_text(&cfg).contains("total"));
        let row = p.to_csv_row(&cfg);
        assert_eq!(row.split(',').count(), ParamReport::CSV_HEADER.split(',').count());
    }
}
