use std::fmt;

use super::params::{Gradients, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step of the fourth-order central-difference stencil.
    pub step: f64,
    pub tolerance: f64,
    /// Cap on entries probed per parameter; larger groups are strided.
    pub max_entries_per_group: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 2e-3,
            tolerance: 1e-4,
            max_entries_per_group: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>12}  status", "group", "entries", "max rel err")?;
        for g in &self.groups {
            write!(f, "{:<28} {:>8} {:>12.3e}  ", g.name, g.checked, g.max_rel_error)?;
            if g.passed {
                writeln!(f, "ok")?;
            } else {
                writeln!(
                    f,
                    "FAIL at entry {}: analytic {:.6e}, numeric {:.6e}",
                    g.worst_index, g.analytic, g.numeric
                )?;
            }
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`. The floor keeps entries whose true
/// gradient is zero from failing on rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter group in `store`. Failures are reported, never raised.
pub fn compare_gradients<F>(
    store: &ParamStore,
    analytic: &Gradients,
    loss: F,
    options: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut groups = Vec::with_capacity(store.len());
    for id in store.ids() {
        let grad = analytic.get(id);
        let n = store.get(id).len();
        let stride = match options.max_entries_per_group {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut report = GroupReport {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for idx in (0..n).step_by(stride) {
            let orig = store.get(id)[idx];
            let h = options.step;
            let mut at = |delta: f64| {
                probe.get_mut(id)[idx] = orig + delta;
                loss(&probe)
            };
            let (up1, down1, up2, down2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            probe.get_mut(id)[idx] = orig;
            let numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * h);
            let err = relative_error(grad[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_index = idx;
                report.analytic = grad[idx];
                report.numeric = numeric;
            }
        }
        report.passed = report.max_rel_error <= options.tolerance;
        groups.push(report);
    }
    GradCheckReport {
        tolerance: options.tolerance,
        groups,
    }
}

/// Builds the loss with `build` on a fresh tape, differentiates it, and
/// checks the result against finite differences of the same builder.
pub fn check_gradients<F>(store: &ParamStore, build: F, options: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.backward(loss)
    };
    compare_gradients(
        store,
        &analytic,
        |s| {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape);
            tape.scalar(loss)
        },
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        let a = store.add("a", 2, 2);
        let b = store.add("b", 2, 1);
        store.set(a, &[0.3, -0.7, 1.1, 0.2]).unwrap();
        store.set(b, &[0.5, -0.4]).unwrap();
        store
    }

    fn build(tape: &mut Tape<'_>) -> Var {
        let store = tape.store();
        let a = tape.param(store.find("a").unwrap());
        let b = tape.param(store.find("b").unwrap());
        let y = tape.matvec(a, b);
        let y = tape.tanh(y);
        let l = tape.log_softmax(y);
        tape.pick(l, 1)
    }

    #[test]
    fn correct_gradients_pass() {
        let store = quadratic_store();
        let report = check_gradients(&store, build, &GradCheckOptions::default());
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn corrupted_entry_is_reported() {
        let store = quadratic_store();
        let mut analytic = {
            let mut tape = Tape::new(&store);
            let loss = build(&mut tape);
            tape.backward(loss)
        };
        let b = store.find("b").unwrap();
        analytic.get_mut(b)[1] *= 2.0;
        let report = compare_gradients(
            &store,
            &analytic,
            |s| {
                let mut tape = Tape::new(s);
                let loss = build(&mut tape);
                tape.scalar(loss)
            },
            &GradCheckOptions::default(),
        );
        let failing: Vec<_> = report.failing().map(|g| g.name.as_str()).collect();
        assert_eq!(failing, vec!["b"]);
        assert_eq!(report.groups[1].worst_index, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
