#[derive(Clone, Debug, PartialEq)]
pub struct VTraceReference {
    pub vs: Vec<f64>,
    pub pg_advantages: Vec<f64>,
}

fn log_prob(logits: &[f64], a: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[a] - max - z.ln()
}

/// V-trace targets by explicit double summation:
/// `vs_s = V_s + sum_{t>=s} (prod_{i=s}^{t-1} γ_i c_i) δ_t` with
/// `δ_t = ρ_t (r_t + γ_t V_{t+1} - V_t)`, and
/// `A_s = ρ_s (r_s + γ_s vs_{s+1} - V_s)`.
#[allow(clippy::too_many_arguments)]
pub fn vtrace_direct(
    behavior_logits: &[Vec<f64>],
    target_logits: &[Vec<f64>],
    actions: &[usize],
    rewards: &[f64],
    discounts: &[f64],
    values: &[f64],
    bootstrap: f64,
    rho_bar: f64,
    c_bar: f64,
) -> VTraceReference {
    let t_len = rewards.len();
    let ratio: Vec<f64> = (0..t_len)
        .map(|t| {
            (log_prob(&target_logits[t], actions[t]) - log_prob(&behavior_logits[t], actions[t])).exp()
        })
        .collect();
    let rho: Vec<f64> = ratio.iter().map(|r| r.min(rho_bar)).collect();
    let c: Vec<f64> = ratio.iter().map(|r| r.min(c_bar)).collect();
    let next_value = |t: usize| if t + 1 < t_len { values[t + 1] } else { bootstrap };
    let delta: Vec<f64> = (0..t_len)
        .map(|t| rho[t] * (rewards[t] + discounts[t] * next_value(t) - values[t]))
        .collect();

    let mut vs = vec![0.0; t_len];
    for s in 0..t_len {
        let mut total = values[s];
        for t in s..t_len {
            let mut coef = 1.0;
            for i in s..t {
                coef *= discounts[i] * c[i];
            }
            total += coef * delta[t];
        }
        vs[s] = total;
    }
    let pg_advantages = (0..t_len)
        .map(|s| {
            let next = if s + 1 < t_len { vs[s + 1] } else { bootstrap };
            rho[s] * (rewards[s] + discounts[s] * next - values[s])
        })
        .collect();
    VTraceReference { vs, pg_advantages }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let l = vec![vec![0.2, -0.1]];
        let r = vtrace_direct(&l, &l, &[1], &[0.5], &[0.9], &[0.3], 2.0, 1.0, 1.0);
        assert!((r.vs[0] - (0.3 + (0.5 + 0.9 * 2.0 - 0.3))).abs() < 1e-15);
    }
}
