use crate::error::{Error, Result};
use crate::tensor::log_softmax_row;

/// Inputs for one trajectory of length `T`.
#[derive(Clone, Copy, Debug)]
pub struct VTraceInput<'a> {
    pub behavior_logits: &'a [Vec<f64>],
    pub target_logits: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub rewards: &'a [f64],
    pub dones: &'a [bool],
    pub values: &'a [f64],
    pub bootstrap: f64,
    pub gamma: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VTraceOutput {
    pub vs: Vec<f64>,
    pub pg_advantages: Vec<f64>,
    /// Clipped importance weights.
    pub rhos: Vec<f64>,
    pub cs: Vec<f64>,
    /// Unclipped `π(a)/μ(a)`.
    pub ratios: Vec<f64>,
}

fn check_finite(name: &str, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    if xs.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("v-trace input {name}")))
    }
}

/// V-trace targets by backward recursion:
/// `vs_s - V_s = δ_s + γ_s c_s (vs_{s+1} - V_{s+1})`,
/// `δ_s = ρ_s (r_s + γ_s V_{s+1} - V_s)`, with `γ_s = γ (1 - done_s)`.
pub fn vtrace(input: &VTraceInput) -> Result<VTraceOutput> {
    let t_len = input.rewards.len();
    let consistent = input.behavior_logits.len() == t_len
        && input.target_logits.len() == t_len
        && input.actions.len() == t_len
        && input.dones.len() == t_len
        && input.values.len() == t_len;
    if !consistent {
        return Err(crate::error::contract("v-trace inputs have inconsistent lengths"));
    }
    if !(input.rho_bar >= input.c_bar && input.c_bar > 0.0) {
        return Err(crate::error::contract("v-trace needs rho_bar >= c_bar > 0"));
    }
    check_finite("rewards", input.rewards.iter().copied())?;
    check_finite("values", input.values.iter().copied().chain([input.bootstrap]))?;
    check_finite("behavior logits", input.behavior_logits.iter().flatten().copied())?;
    check_finite("target logits", input.target_logits.iter().flatten().copied())?;

    let mut ratios = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let a = input.actions[t];
        let lt = log_softmax_row(&input.target_logits[t]);
        let lb = log_softmax_row(&input.behavior_logits[t]);
        if a >= lt.len() {
            return Err(Error::InvalidAction {
                action: a,
                n_actions: lt.len(),
            });
        }
        ratios.push((lt[a] - lb[a]).exp());
    }
    let rhos: Vec<f64> = ratios.iter().map(|r| r.min(input.rho_bar)).collect();
    let cs: Vec<f64> = ratios.iter().map(|r| r.min(input.c_bar)).collect();
    let discounts: Vec<f64> = input
        .dones
        .iter()
        .map(|&d| if d { 0.0 } else { input.gamma })
        .collect();
    let next_value = |t: usize| {
        if t + 1 < t_len {
            input.values[t + 1]
        } else {
            input.bootstrap
        }
    };

    let mut vs = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rhos[t] * (input.rewards[t] + discounts[t] * next_value(t) - input.values[t]);
        acc = delta + discounts[t] * cs[t] * acc;
        vs[t] = input.values[t] + acc;
    }
    let pg_advantages = (0..t_len)
        .map(|t| {
            let next = if t + 1 < t_len { vs[t + 1] } else { input.bootstrap };
            rhos[t] * (input.rewards[t] + discounts[t] * next - input.values[t])
        })
        .collect();
    Ok(VTraceOutput {
        vs,
        pg_advantages,
        rhos,
        cs,
        ratios,
    })
}
