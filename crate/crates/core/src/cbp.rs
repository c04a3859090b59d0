//! Continual backpropagation: contribution-utility tracking and selective
//! reinitialization of mature low-utility hidden units.
//!
//! A unit is an output feature of a hidden trainable layer (a channel for
//! conv layers). Its contribution on a batch is the batch mean of `|h|`
//! (spatially averaged for channels) times the summed magnitude of the
//! weights that consume it in the next trainable layer. Pool and flatten
//! layers in between only move those weights around: a channel feeding a
//! linear layer through flatten owns a contiguous block of input columns.
//!
//! Replacement is driven by an exact count: after `E` eligible unit-steps a
//! layer has owed `floor(rate · E)` resets in total, so the fractional
//! accumulator never drifts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{Network, ParamKey, ParamSlot, TrainableMut};
use crate::optim::SgdMomentum;
use crate::rng::kaiming_uniform;

#[derive(Debug, Clone, PartialEq)]
pub struct CbpConfig {
    pub replacement_rate: f64,
    pub decay_rate: f64,
    pub maturity_threshold: u64,
    /// Names of hidden layers excluded from replacement.
    pub skip_layers: Vec<String>,
}

impl Default for CbpConfig {
    fn default() -> Self {
        CbpConfig {
            replacement_rate: 1e-4,
            decay_rate: 0.99,
            maturity_threshold: 100,
            skip_layers: Vec::new(),
        }
    }
}

impl CbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.replacement_rate) {
            return Err(Error::Config(format!(
                "cbp.replacement_rate must lie in [0, 1), got {}",
                self.replacement_rate
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(Error::Config(format!(
                "cbp.decay_rate must lie in (0, 1), got {}",
                self.decay_rate
            )));
        }
        if self.maturity_threshold < 1 {
            return Err(Error::Config("cbp.maturity_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-layer unit statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStats {
    pub utility: Vec<f64>,
    pub age: Vec<u64>,
    /// Total eligible unit-steps seen so far.
    pub eligible_steps: u64,
    pub resets: u64,
    pub enabled: bool,
}

impl UnitStats {
    fn new(units: usize, enabled: bool) -> Self {
        UnitStats {
            utility: vec![0.0; units],
            age: vec![0; units],
            eligible_steps: 0,
            resets: 0,
            enabled,
        }
    }

    /// Fractional replacements owed but not yet performed.
    pub fn accumulator(&self, rate: f64) -> f64 {
        rate * self.eligible_steps as f64 - self.resets as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetEvent {
    pub step: u64,
    pub layer: usize,
    pub unit: usize,
    pub age_at_reset: u64,
    pub utility_at_reset: f64,
}

#[derive(Debug, Clone)]
pub struct Cbp {
    pub config: CbpConfig,
    stats: Vec<UnitStats>,
    step: u64,
    log: Vec<ResetEvent>,
}

/// Per-unit input/output geometry of the weights around hidden layer `t`.
struct UnitGeometry {
    units: usize,
    /// Incoming weight entries per unit (one contiguous row).
    fan_in: usize,
}

fn geometry(view: &TrainableMut<'_>) -> UnitGeometry {
    match view {
        TrainableMut::Conv(c) => UnitGeometry {
            units: c.out_ch,
            fan_in: c.in_ch * c.kernel * c.kernel,
        },
        TrainableMut::Linear(l) => UnitGeometry {
            units: l.out_features,
            fan_in: l.in_features,
        },
    }
}

/// Indices into the next layer's weight that read unit `i` of a layer with `units` units.
fn outgoing_indices(next: &TrainableMut<'_>, units: usize, i: usize) -> Vec<usize> {
    match next {
        TrainableMut::Conv(c) => {
            let kk = c.kernel * c.kernel;
            let per_out = c.in_ch * kk;
            (0..c.out_ch)
                .flat_map(|o| (0..kk).map(move |j| o * per_out + i * kk + j))
                .collect()
        }
        TrainableMut::Linear(l) => {
            let block = l.in_features / units;
            (0..l.out_features)
                .flat_map(|o| (i * block..(i + 1) * block).map(move |c| o * l.in_features + c))
                .collect()
        }
    }
}

fn weight_of<'a>(view: &'a mut TrainableMut<'_>) -> (&'a mut [f64], &'a mut [f64]) {
    match view {
        TrainableMut::Conv(c) => (c.weight.data_mut(), c.bias.data_mut()),
        TrainableMut::Linear(l) => (l.weight.data_mut(), l.bias.data_mut()),
    }
}

/// Batch mean of `|h|` per unit, averaging channels over space.
pub fn mean_abs_activation(h: &crate::tensor::Tensor, units: usize) -> Result<Vec<f64>> {
    let s = h.shape();
    if s.len() < 2 || s[1] != units {
        return Err(Error::State(format!(
            "activation shape {s:?} does not match {units} tracked units"
        )));
    }
    let b = s[0];
    let spatial: usize = s[2..].iter().product();
    let mut out = vec![0.0; units];
    for n in 0..b {
        for (u, o) in out.iter_mut().enumerate() {
            let start = (n * units + u) * spatial;
            let sum: f64 = h.data()[start..start + spatial].iter().map(|v| v.abs()).sum();
            *o += sum / spatial as f64;
        }
    }
    for o in &mut out {
        *o /= b.max(1) as f64;
    }
    Ok(out)
}

impl Cbp {
    pub fn new(config: CbpConfig, net: &mut Network) -> Result<Self> {
        config.validate()?;
        let names = net.layer_names().to_vec();
        for skip in &config.skip_layers {
            if !names[..names.len() - 1].contains(skip) {
                return Err(Error::Config(format!("cbp: no hidden layer named {skip:?}")));
            }
        }
        let stats = (0..net.num_trainable() - 1)
            .map(|t| {
                let units = geometry(&net.trainable_mut(t)).units;
                UnitStats::new(units, !config.skip_layers.contains(&names[t]))
            })
            .collect();
        Ok(Cbp {
            config,
            stats,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn stats(&self) -> &[UnitStats] {
        &self.stats
    }

    pub fn reset_log(&self) -> &[ResetEvent] {
        &self.log
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Fold the latest training forward pass into utilities and ages.
    pub fn update_utility(&mut self, net: &mut Network) -> Result<()> {
        let decay = self.config.decay_rate;
        for t in 0..self.stats.len() {
            let units = self.stats[t].utility.len();
            let act = net
                .site_output(t)
                .ok_or_else(|| Error::State("cbp utility update before a training forward".into()))?;
            let mean_h = mean_abs_activation(act, units)?;
            let (_, next) = net.trainable_pair_mut(t);
            let w_next = match &next {
                TrainableMut::Conv(c) => c.weight.data(),
                TrainableMut::Linear(l) => l.weight.data(),
            };
            let st = &mut self.stats[t];
            for (i, &h) in mean_h.iter().enumerate() {
                let out: f64 = outgoing_indices(&next, units, i).iter().map(|&j| w_next[j].abs()).sum();
                st.utility[i] = decay * st.utility[i] + (1.0 - decay) * h * out;
                st.age[i] += 1;
            }
        }
        Ok(())
    }

    /// Reset owed units in every enabled layer. Returns the events of this step.
    pub fn reinit_step(&mut self, net: &mut Network, opt: &mut SgdMomentum, rng: &mut impl Rng) -> Vec<ResetEvent> {
        self.step += 1;
        let rate = self.config.replacement_rate;
        let maturity = self.config.maturity_threshold;
        let mut events = Vec::new();
        for t in 0..self.stats.len() {
            let st = &mut self.stats[t];
            if !st.enabled {
                continue;
            }
            let mut eligible: Vec<usize> = (0..st.age.len()).filter(|&i| st.age[i] > maturity).collect();
            st.eligible_steps += eligible.len() as u64;
            // the epsilon absorbs representation error in rate · E (e.g. 1e-4 · 10⁴)
            let owed = (rate * st.eligible_steps as f64 + 1e-9).floor() as u64;
            while st.resets < owed && !eligible.is_empty() {
                let (pos, &unit) = eligible
                    .iter()
                    .enumerate()
                    .min_by(|(_, &a), (_, &b)| st.utility[a].total_cmp(&st.utility[b]).then(a.cmp(&b)))
                    .expect("nonempty");
                eligible.remove(pos);
                events.push(ResetEvent {
                    step: self.step,
                    layer: t,
                    unit,
                    age_at_reset: st.age[unit],
                    utility_at_reset: st.utility[unit],
                });
                st.utility[unit] = 0.0;
                st.age[unit] = 0;
                st.resets += 1;
                reset_unit(net, opt, t, unit, rng);
            }
        }
        self.log.extend_from_slice(&events);
        events
    }
}

/// Fresh incoming weights, zero bias, zero outgoing weights, zero momentum on all of them.
fn reset_unit(net: &mut Network, opt: &mut SgdMomentum, t: usize, unit: usize, rng: &mut impl Rng) {
    let (mut cur, mut next) = net.trainable_pair_mut(t);
    let g = geometry(&cur);
    let (w, b) = weight_of(&mut cur);
    let row = unit * g.fan_in..(unit + 1) * g.fan_in;
    kaiming_uniform(rng, g.fan_in, &mut w[row.clone()]);
    b[unit] = 0.0;
    let out = outgoing_indices(&next, g.units, unit);
    let (w_next, _) = weight_of(&mut next);
    for &j in &out {
        w_next[j] = 0.0;
    }
    opt.reset_entries(ParamKey { layer: t, slot: ParamSlot::Weight }, row);
    opt.reset_entries(ParamKey { layer: t, slot: ParamSlot::Bias }, [unit]);
    opt.reset_entries(ParamKey { layer: t + 1, slot: ParamSlot::Weight }, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::network::{Architecture, LayerSpec};
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    fn small_net() -> Network {
        let specs = [
            LayerSpec::Conv { in_ch: 1, out_ch: 2, kernel: 3 },
            LayerSpec::Pool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 8, outputs: 3 },
            LayerSpec::Linear { inputs: 3, outputs: 2 },
        ];
        Network::from_specs(&specs, [1, 6, 6], ActivationKind::Relu, &mut rng_for(1, "t", &[])).unwrap()
    }

    #[test]
    fn conv_spatial_mean_matches_brute_force() {
        let mut rng = rng_for(2, "h", &[]);
        let h = Tensor::from_vec(&[3, 2, 2, 2], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let got = mean_abs_activation(&h, 2).unwrap();
        for (c, g) in got.iter().enumerate() {
            let mut total = 0.0;
            for n in 0..3 {
                for p in 0..4 {
                    total += h.data()[n * 8 + c * 4 + p].abs();
                }
            }
            assert!((g - total / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_block_ownership() {
        let mut net = small_net();
        let (_, next) = net.trainable_pair_mut(0);
        // channel 1 owns flattened inputs 4..8 of every output row
        let idx = outgoing_indices(&next, 2, 1);
        assert_eq!(idx, vec![4, 5, 6, 7, 12, 13, 14, 15, 20, 21, 22, 23]);
    }

    #[test]
    fn constant_contribution_follows_geometric_series() {
        let mut st = 0.0;
        for k in 1..=50 {
            st = 0.99 * st + 0.01 * 1.0;
            let closed = 1.0 - 0.99f64.powi(k);
            assert!((st - closed).abs() < 1e-13);
        }
    }

    #[test]
    fn reset_zeroes_outgoing_and_stats() {
        let mut net = small_net();
        let x = Tensor::full(&[2, 1, 6, 6], 0.5);
        let mut opt = SgdMomentum::default();
        let cfg = CbpConfig {
            replacement_rate: 0.5,
            maturity_threshold: 1,
            ..CbpConfig::default()
        };
        let mut cbp = Cbp::new(cfg, &mut net).unwrap();
        let mut rng = rng_for(3, "cbp", &[]);
        let mut all = Vec::new();
        for _ in 0..3 {
            net.forward_train(&x).unwrap();
            cbp.update_utility(&mut net).unwrap();
            all.extend(cbp.reinit_step(&mut net, &mut opt, &mut rng));
        }
        assert!(!all.is_empty());
        assert!(all.iter().all(|e| e.age_at_reset > 1));
        let last = *all.last().unwrap();
        assert_eq!(cbp.stats()[last.layer].age[last.unit], 0);
        assert_eq!(cbp.stats()[last.layer].utility[last.unit], 0.0);
        let (_, next) = net.trainable_pair_mut(last.layer);
        let units = cbp.stats()[last.layer].age.len();
        let idx = outgoing_indices(&next, units, last.unit);
        let (_, mut next) = net.trainable_pair_mut(last.layer);
        let (w, _) = weight_of(&mut next);
        assert!(idx.iter().all(|&j| w[j] == 0.0));
    }

    #[test]
    fn unknown_skip_layer_rejected() {
        let mut net = Network::new(Architecture::Compact, 3, ActivationKind::Relu, &mut rng_for(0, "n", &[])).unwrap();
        let cfg = CbpConfig {
            skip_layers: vec!["head".into()],
            ..CbpConfig::default()
        };
        assert!(Cbp::new(cfg, &mut net).is_err());
    }
}
