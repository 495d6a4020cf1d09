//! User beancounter accounting: per-container resource parameters with
//! held/maxheld/barrier/limit/failcnt attributes, charge/uncharge semantics
//! and node-level stability checking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Page size used for all memory-denominated parameters.
pub const PAGE_BYTES: u64 = 4096;
/// Pages per MiB at 4 KiB pages.
pub const PAGES_PER_MIB: u64 = 256;

/// Convert MiB to pages.
pub fn mib_to_pages(mib: u64) -> u64 {
    mib * PAGES_PER_MIB
}

/// Convert a byte count to pages, rounding up.
pub fn bytes_to_pages(bytes: u64) -> u64 {
    bytes.div_ceil(PAGE_BYTES)
}

/// A barrier or limit value. `Unlimited` compares greater than every
/// finite count (it stands in for the maximum representable integer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bound {
    Finite(u64),
    Unlimited,
}

impl Bound {
    pub fn is_unlimited(&self) -> bool {
        matches!(self, Bound::Unlimited)
    }

    /// Finite value, or `None` for `Unlimited`.
    pub fn finite(&self) -> Option<u64> {
        match self {
            Bound::Finite(v) => Some(*v),
            Bound::Unlimited => None,
        }
    }

    fn allows(&self, prospective: u64) -> bool {
        match self {
            Bound::Finite(v) => prospective <= *v,
            Bound::Unlimited => true,
        }
    }
}

/// The tracked beancounter parameters. Memory-page parameters are
/// denominated in 4 KiB pages; `kmemsize` and the four buffer parameters
/// are denominated in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Vmguarpages,
    Privvmpages,
    Oomguarpages,
    Kmemsize,
    Tcpsndbuf,
    Tcprcvbuf,
    Othersockbuf,
    Dgramrcvbuf,
    Physpages,
}

impl ParamId {
    pub const ALL: [ParamId; 9] = [
        ParamId::Vmguarpages,
        ParamId::Privvmpages,
        ParamId::Oomguarpages,
        ParamId::Kmemsize,
        ParamId::Tcpsndbuf,
        ParamId::Tcprcvbuf,
        ParamId::Othersockbuf,
        ParamId::Dgramrcvbuf,
        ParamId::Physpages,
    ];

    /// The four socket-buffer parameters.
    pub const BUFFERS: [ParamId; 4] = [
        ParamId::Tcpsndbuf,
        ParamId::Tcprcvbuf,
        ParamId::Othersockbuf,
        ParamId::Dgramrcvbuf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamId::Vmguarpages => "vmguarpages",
            ParamId::Privvmpages => "privvmpages",
            ParamId::Oomguarpages => "oomguarpages",
            ParamId::Kmemsize => "kmemsize",
            ParamId::Tcpsndbuf => "tcpsndbuf",
            ParamId::Tcprcvbuf => "tcprcvbuf",
            ParamId::Othersockbuf => "othersockbuf",
            ParamId::Dgramrcvbuf => "dgramrcvbuf",
            ParamId::Physpages => "physpages",
        }
    }

    fn index(&self) -> usize {
        Self::ALL.iter().position(|p| p == self).unwrap()
    }
}

/// One beancounter parameter: current usage, high-water mark, soft and hard
/// bounds, and the count of denied requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbcParam {
    pub held: u64,
    pub maxheld: u64,
    pub barrier: Bound,
    pub limit: Bound,
    pub failcnt: u64,
}

impl UbcParam {
    pub fn unlimited() -> Self {
        UbcParam {
            held: 0,
            maxheld: 0,
            barrier: Bound::Unlimited,
            limit: Bound::Unlimited,
            failcnt: 0,
        }
    }

    fn add(&mut self, units: u64) {
        self.held += units;
        self.maxheld = self.maxheld.max(self.held);
    }
}

impl Default for UbcParam {
    fn default() -> Self {
        UbcParam::unlimited()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UbcError {
    #[error("uncharge of {units} {param} exceeds held {held}")]
    Underflow {
        param: &'static str,
        held: u64,
        units: u64,
    },
}

/// Result of a charge attempt. Denial is an outcome, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeResult {
    Granted,
    Denied,
}

impl ChargeResult {
    pub fn granted(&self) -> bool {
        matches!(self, ChargeResult::Granted)
    }
}

/// The per-container set of beancounter parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbcTable {
    params: [UbcParam; 9],
}

impl Default for UbcTable {
    fn default() -> Self {
        UbcTable {
            params: [UbcParam::unlimited(); 9],
        }
    }
}

impl UbcTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> &UbcParam {
        &self.params[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut UbcParam {
        &mut self.params[id.index()]
    }

    /// Unconditional accounting for parameters no scenario limits
    /// (kernel memory, socket buffers, touched pages, resident pages).
    pub fn charge(&mut self, id: ParamId, units: u64) {
        self.get_mut(id).add(units);
    }

    /// Release `units` of a parameter. Underflow signals a simulator bug.
    pub fn uncharge(&mut self, id: ParamId, units: u64) -> Result<(), UbcError> {
        let param = self.get_mut(id);
        if units > param.held {
            return Err(UbcError::Underflow {
                param: id.name(),
                held: param.held,
                units,
            });
        }
        param.held -= units;
        Ok(())
    }

    /// Attempt a private-memory allocation of `pages`, applying the tier
    /// rules against the prospective total `privvmpages.held + pages`:
    ///
    /// 1. at or below the `vmguarpages` barrier the allocation is
    ///    guaranteed to succeed;
    /// 2. at or below the `privvmpages` barrier it succeeds if the host
    ///    has free memory;
    /// 3. at or below the `privvmpages` limit it succeeds only for
    ///    high-priority requests while the host has free memory;
    /// 4. above the limit it always fails.
    ///
    /// A denial increments `privvmpages.failcnt` and leaves `held` alone.
    pub fn charge_privvm(
        &mut self,
        pages: u64,
        host_has_free: bool,
        high_priority: bool,
    ) -> ChargeResult {
        debug_assert!(pages > 0);
        let prospective = self.get(ParamId::Privvmpages).held + pages;
        let guarantee = self.get(ParamId::Vmguarpages).barrier;
        let barrier = self.get(ParamId::Privvmpages).barrier;
        let limit = self.get(ParamId::Privvmpages).limit;

        let granted = if guarantee.allows(prospective) {
            true
        } else if barrier.allows(prospective) {
            host_has_free
        } else if limit.allows(prospective) {
            high_priority && host_has_free
        } else {
            false
        };

        if granted {
            self.get_mut(ParamId::Privvmpages).add(pages);
            ChargeResult::Granted
        } else {
            self.get_mut(ParamId::Privvmpages).failcnt += 1;
            ChargeResult::Denied
        }
    }

    /// Memory actually in use for out-of-memory bookkeeping: touched pages
    /// plus kernel memory and socket buffers converted to pages.
    pub fn oom_usage_pages(&self) -> u64 {
        let mut total = self.get(ParamId::Oomguarpages).held;
        total += bytes_to_pages(self.get(ParamId::Kmemsize).held);
        for buf in ParamId::BUFFERS {
            total += bytes_to_pages(self.get(buf).held);
        }
        total
    }

    /// The memory this table commits the node to: the larger of the two
    /// guarantee barriers.
    pub fn guarantee_pages(&self) -> Bound {
        let vm = self.get(ParamId::Vmguarpages).barrier;
        let oom = self.get(ParamId::Oomguarpages).barrier;
        vm.max(oom)
    }
}

/// A named ladder rung of guarantee/limit settings, fields in pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub name: String,
    pub oomguarpages_barrier: u64,
    pub vmguarpages_barrier: u64,
    pub privvmpages_barrier: u64,
    pub privvmpages_limit: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("profile {name}: {field} must be positive")]
    NonPositive { name: String, field: &'static str },
    #[error("profile {name}: privvmpages barrier {barrier} exceeds limit {limit}")]
    BarrierAboveLimit { name: String, barrier: u64, limit: u64 },
}

impl MemoryProfile {
    pub fn from_mib(
        name: impl Into<String>,
        oomguar_mib: u64,
        vmguar_mib: u64,
        privvm_barrier_mib: u64,
        privvm_limit_mib: u64,
    ) -> Self {
        MemoryProfile {
            name: name.into(),
            oomguarpages_barrier: mib_to_pages(oomguar_mib),
            vmguarpages_barrier: mib_to_pages(vmguar_mib),
            privvmpages_barrier: mib_to_pages(privvm_barrier_mib),
            privvmpages_limit: mib_to_pages(privvm_limit_mib),
        }
    }

    /// Checks hard invariants; the typical relative ordering of the three
    /// barriers is only advisory, so violations of it come back as
    /// warnings rather than errors.
    pub fn validate(&self) -> Result<Vec<String>, ProfileError> {
        for (field, value) in [
            ("oomguarpages barrier", self.oomguarpages_barrier),
            ("vmguarpages barrier", self.vmguarpages_barrier),
            ("privvmpages barrier", self.privvmpages_barrier),
            ("privvmpages limit", self.privvmpages_limit),
        ] {
            if value == 0 {
                return Err(ProfileError::NonPositive {
                    name: self.name.clone(),
                    field,
                });
            }
        }
        if self.privvmpages_barrier > self.privvmpages_limit {
            return Err(ProfileError::BarrierAboveLimit {
                name: self.name.clone(),
                barrier: self.privvmpages_barrier,
                limit: self.privvmpages_limit,
            });
        }

        let mut warnings = Vec::new();
        if self.vmguarpages_barrier > self.privvmpages_barrier {
            warnings.push(format!(
                "profile {}: vmguarpages barrier {} above privvmpages barrier {}",
                self.name, self.vmguarpages_barrier, self.privvmpages_barrier
            ));
        }
        if self.oomguarpages_barrier > self.vmguarpages_barrier {
            warnings.push(format!(
                "profile {}: oomguarpages barrier {} above vmguarpages barrier {}",
                self.name, self.oomguarpages_barrier, self.vmguarpages_barrier
            ));
        }
        Ok(warnings)
    }

    /// Set this profile's barriers and limits on a table, leaving usage
    /// counters untouched.
    pub fn apply_to(&self, table: &mut UbcTable) {
        let oom = table.get_mut(ParamId::Oomguarpages);
        oom.barrier = Bound::Finite(self.oomguarpages_barrier);
        oom.limit = Bound::Unlimited;
        let vm = table.get_mut(ParamId::Vmguarpages);
        vm.barrier = Bound::Finite(self.vmguarpages_barrier);
        vm.limit = Bound::Unlimited;
        let priv_vm = table.get_mut(ParamId::Privvmpages);
        priv_vm.barrier = Bound::Finite(self.privvmpages_barrier);
        priv_vm.limit = Bound::Finite(self.privvmpages_limit);
    }
}

/// Outcome of a node-level configuration stability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub overcommit_factor: f64,
    pub stable: bool,
}

/// Compare the sum of hosted guarantees against the node's physical memory
/// plus swap. Overcommitment is reported, never rejected.
pub fn check_stability(tables: &[&UbcTable], node_ram: u64, node_swap: u64) -> StabilityReport {
    let mut committed = 0.0f64;
    for table in tables {
        match table.guarantee_pages() {
            Bound::Finite(pages) => committed += pages as f64,
            Bound::Unlimited => committed = f64::INFINITY,
        }
    }
    let capacity = (node_ram + node_swap) as f64;
    let overcommit_factor = if committed == 0.0 {
        0.0
    } else {
        committed / capacity
    };
    StabilityReport {
        overcommit_factor,
        stable: overcommit_factor <= 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_64() -> UbcTable {
        let mut t = UbcTable::new();
        MemoryProfile::from_mib("64", 60, 64, 64, 66).apply_to(&mut t);
        t
    }

    #[test]
    fn charge_below_guarantee_always_granted() {
        let mut t = table_64();
        assert_eq!(t.charge_privvm(100, false, false), ChargeResult::Granted);
        assert_eq!(t.get(ParamId::Privvmpages).held, 100);
        assert_eq!(t.get(ParamId::Privvmpages).failcnt, 0);
    }

    #[test]
    fn charge_above_limit_always_denied() {
        let mut t = table_64();
        t.get_mut(ParamId::Privvmpages).add(16000);
        assert_eq!(t.charge_privvm(1024, true, true), ChargeResult::Denied);
        assert_eq!(t.get(ParamId::Privvmpages).held, 16000);
        assert_eq!(t.get(ParamId::Privvmpages).failcnt, 1);
    }

    #[test]
    fn charge_between_barrier_and_limit_needs_priority_and_free_host() {
        let mut t = table_64();
        t.get_mut(ParamId::Privvmpages).add(16300);
        assert_eq!(t.charge_privvm(200, false, false), ChargeResult::Denied);
        assert_eq!(t.charge_privvm(200, true, false), ChargeResult::Denied);
        assert_eq!(t.charge_privvm(200, false, true), ChargeResult::Denied);
        assert_eq!(t.charge_privvm(200, true, true), ChargeResult::Granted);
        assert_eq!(t.get(ParamId::Privvmpages).held, 16500);
        assert_eq!(t.get(ParamId::Privvmpages).failcnt, 3);
    }

    #[test]
    fn charge_between_guarantee_and_barrier_needs_free_host() {
        let mut t = UbcTable::new();
        MemoryProfile::from_mib("tiered", 30, 40, 64, 66).apply_to(&mut t);
        t.get_mut(ParamId::Privvmpages).add(mib_to_pages(50));
        assert_eq!(t.charge_privvm(10, false, false), ChargeResult::Denied);
        assert_eq!(t.charge_privvm(10, true, false), ChargeResult::Granted);
    }

    #[test]
    fn exactly_at_limit_is_legal() {
        let mut t = table_64();
        t.get_mut(ParamId::Privvmpages).add(16896 - 100);
        assert_eq!(t.charge_privvm(100, true, true), ChargeResult::Granted);
        assert_eq!(t.get(ParamId::Privvmpages).held, 16896);
    }

    #[test]
    fn maxheld_tracks_high_water_mark() {
        let mut t = table_64();
        t.charge_privvm(100, true, false);
        t.uncharge(ParamId::Privvmpages, 30).unwrap();
        assert_eq!(t.get(ParamId::Privvmpages).held, 70);
        assert_eq!(t.get(ParamId::Privvmpages).maxheld, 100);
    }

    #[test]
    fn uncharge_full_and_partial() {
        let mut t = table_64();
        t.charge(ParamId::Kmemsize, 100);
        t.uncharge(ParamId::Kmemsize, 100).unwrap();
        assert_eq!(t.get(ParamId::Kmemsize).held, 0);
    }

    #[test]
    fn uncharge_underflow_is_an_error() {
        let mut t = table_64();
        t.charge(ParamId::Kmemsize, 10);
        let err = t.uncharge(ParamId::Kmemsize, 20).unwrap_err();
        assert_eq!(
            err,
            UbcError::Underflow {
                param: "kmemsize",
                held: 10,
                units: 20
            }
        );
    }

    #[test]
    fn stability_factor_small_cluster() {
        let mut a = UbcTable::new();
        let mut b = UbcTable::new();
        for t in [&mut a, &mut b] {
            t.get_mut(ParamId::Vmguarpages).barrier = Bound::Finite(16384);
            t.get_mut(ParamId::Oomguarpages).barrier = Bound::Finite(15360);
        }
        let report = check_stability(&[&a, &b], 524288, 524288);
        assert!((report.overcommit_factor - 0.03125).abs() < 1e-12);
        assert!(report.stable);
    }

    #[test]
    fn stability_empty_and_boundary() {
        let report = check_stability(&[], 1000, 0);
        assert_eq!(report.overcommit_factor, 0.0);
        assert!(report.stable);

        let mut t = UbcTable::new();
        t.get_mut(ParamId::Vmguarpages).barrier = Bound::Finite(1000);
        t.get_mut(ParamId::Oomguarpages).barrier = Bound::Finite(900);
        let report = check_stability(&[&t], 600, 400);
        assert_eq!(report.overcommit_factor, 1.0);
        assert!(report.stable, "boundary is inclusive");
    }

    #[test]
    fn unlimited_compares_above_every_finite() {
        assert!(Bound::Finite(u64::MAX) < Bound::Unlimited);
        assert!(Bound::Finite(5) < Bound::Finite(6));
    }

    #[test]
    fn profile_validation_warns_on_atypical_ordering() {
        let profile = MemoryProfile::from_mib("odd", 200, 64, 64, 66);
        let warnings = profile.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("oomguarpages"));
    }

    #[test]
    fn profile_validation_rejects_barrier_above_limit() {
        let profile = MemoryProfile::from_mib("bad", 60, 64, 66, 64);
        assert!(matches!(
            profile.validate(),
            Err(ProfileError::BarrierAboveLimit { .. })
        ));
    }

    #[test]
    fn profile_conversion_is_4kib_pages() {
        let p = MemoryProfile::from_mib("64", 60, 64, 64, 66);
        assert_eq!(p.privvmpages_barrier, 16384);
        assert_eq!(p.privvmpages_limit, 16896);
        assert_eq!(p.oomguarpages_barrier, 15360);
    }
}
