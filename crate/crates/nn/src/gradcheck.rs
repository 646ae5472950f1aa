//! Central finite-difference checks of reverse-mode gradients.

use rand::Rng;
use tensorformer_core::rng::{purpose, stream};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{NnError, Result};

/// Gradients smaller than this times `max(1, |loss|)` are compared
/// absolutely: below it the central difference is dominated by the
/// round-off in the loss itself.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub arrays: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `name[row, col]` of the worst entry.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(θ + h) - f(θ - h)) / 2h` for trainable
/// parameters of the store reached through `store`. With `sample = Some(k)`
/// only `k` entries per array (chosen from `seed`) are probed; otherwise
/// every entry is. Parameter values are restored exactly afterwards.
pub fn check_gradients<T>(
    target: &mut T,
    store: fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T) -> Result<f64>,
    analytic: &Gradients,
    h: f64,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let floor = RELATIVE_FLOOR * loss(target)?.abs().max(1.0);
    let ids: Vec<_> = store(target).ids().filter(|&id| store(target).get(id).trainable).collect();
    let mut report = GradCheckReport {
        arrays: 0,
        entries: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for id in ids {
        let (name, dim) = {
            let p = store(target).get(id);
            (p.name.clone(), p.value.dim())
        };
        let g = analytic
            .get(id)
            .ok_or_else(|| NnError::Training(format!("no analytic gradient for trainable parameter {name}")))?
            .clone();
        let n = dim.0 * dim.1;
        let picks: Vec<usize> = match sample {
            Some(k) if k < n => {
                let mut rng = stream(seed, purpose::INIT, 1 << 40 | id.index() as u64);
                (0..k).map(|_| rng.gen_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        report.arrays += 1;
        for flat in picks {
            let (r, c) = (flat / dim.1, flat % dim.1);
            let orig = store(target).value(id)[[r, c]];
            store(target).value_mut(id)[[r, c]] = orig + h;
            let up = loss(target)?;
            store(target).value_mut(id)[[r, c]] = orig - h;
            let down = loss(target)?;
            store(target).value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(g[[r, c]], numeric, floor);
            report.entries += 1;
            if report.worst.is_empty() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{name}[{r}, {c}] analytic {:.6e} numeric {numeric:.6e}", g[[r, c]]);
            }
        }
    }
    Ok(report)
}
