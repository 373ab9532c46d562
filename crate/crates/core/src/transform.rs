//! Function-preserving architecture morphisms.
//!
//! `net2wider` replicates hidden units and divides their outgoing weights by
//! the replication count; `net2deeper` inserts an identity ReLU layer. Both
//! leave the network's logits unchanged. Each transform also reports an
//! [`IndexMap`] from old flat coordinates to new ones and the
//! [`ExpansionMask`] of coordinates that have no valid old counterpart.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RecError, Result};
use crate::netcore::{Activation, Arch, DenseNet, Layer};
use crate::regularize::ExpansionMask;
use crate::seeds;

pub const MAX_WIDER_ACTIONS: usize = 2;
pub const MAX_DEEPER_ACTIONS: usize = 3;
/// Hidden layers may grow to at most this multiple of the widest initial layer.
pub const WIDTH_CAP_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiderAction {
    /// Hidden-layer index (0 = first hidden layer).
    pub layer_index: usize,
    pub new_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeeperAction {
    /// The identity layer is inserted right after this hidden layer.
    pub insert_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Wider(WiderAction),
    Deeper(DeeperAction),
}

impl Action {
    pub fn wider(layer_index: usize, new_width: usize) -> Self {
        Action::Wider(WiderAction {
            layer_index,
            new_width,
        })
    }

    pub fn deeper(insert_after: usize) -> Self {
        Action::Deeper(DeeperAction { insert_after })
    }

    /// The architecture this action produces, without touching weights.
    pub fn apply_to_arch(&self, arch: &Arch) -> Result<Arch> {
        let mut hidden = arch.hidden_widths().to_vec();
        match *self {
            Action::Wider(a) => {
                let w = hidden.get_mut(a.layer_index).ok_or_else(|| {
                    RecError::InvalidAction(format!("no hidden layer {}", a.layer_index))
                })?;
                *w = a.new_width;
            }
            Action::Deeper(a) => {
                let w = *hidden.get(a.insert_after).ok_or_else(|| {
                    RecError::InvalidAction(format!("no hidden layer {}", a.insert_after))
                })?;
                hidden.insert(a.insert_after + 1, w);
            }
        }
        arch.with_hidden(hidden)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Wider(a) => write!(f, "W {} {}", a.layer_index, a.new_width),
            Action::Deeper(a) => write!(f, "D {}", a.insert_after),
        }
    }
}

impl FromStr for Action {
    type Err = RecError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || RecError::Format(format!("bad action line {s:?}"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let mut num = || -> Result<usize> {
            parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        let action = match kind {
            "W" => {
                let layer = num()?;
                let width = num()?;
                Action::wider(layer, width)
            }
            "D" => Action::deeper(num()?),
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(action)
    }
}

/// One action per line, `W <layer> <width>` or `D <after>`.
pub fn format_action_log(actions: &[Action]) -> String {
    actions.iter().map(|a| format!("{a}\n")).collect()
}

/// Blank lines and `#` comments are skipped.
pub fn parse_action_log(text: &str) -> Result<Vec<Action>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformLimits {
    pub max_wider: usize,
    pub max_deeper: usize,
    pub max_width: usize,
}

impl TransformLimits {
    pub fn for_arch(initial: &Arch) -> Self {
        let widest = initial.hidden_widths().iter().copied().max().unwrap_or(1);
        TransformLimits {
            max_wider: MAX_WIDER_ACTIONS,
            max_deeper: MAX_DEEPER_ACTIONS,
            max_width: WIDTH_CAP_FACTOR * widest,
        }
    }
}

/// Where each old flat coordinate lives after a transform.
///
/// `None` marks a coordinate whose value the transform changed (outgoing
/// weights of a replicated unit); it has no valid anchor in the new net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    old_to_new: Vec<Option<usize>>,
    new_len: usize,
}

impl IndexMap {
    pub fn identity(len: usize) -> Self {
        IndexMap {
            old_to_new: (0..len).map(Some).collect(),
            new_len: len,
        }
    }

    pub fn old_len(&self) -> usize {
        self.old_to_new.len()
    }

    pub fn new_len(&self) -> usize {
        self.new_len
    }

    pub fn get(&self, old: usize) -> Option<usize> {
        self.old_to_new[old]
    }

    pub fn old_to_new(&self) -> &[Option<usize>] {
        &self.old_to_new
    }

    /// For each new coordinate, the old coordinate it carries over, if any.
    pub fn inverse(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.new_len];
        for (old, new) in self.old_to_new.iter().enumerate() {
            if let Some(n) = *new {
                inv[n] = Some(old);
            }
        }
        inv
    }

    /// `self` then `next`.
    pub fn then(&self, next: &IndexMap) -> Result<IndexMap> {
        if self.new_len != next.old_len() {
            return Err(RecError::shape("index map composition", self.new_len, next.old_len()));
        }
        Ok(IndexMap {
            old_to_new: self
                .old_to_new
                .iter()
                .map(|m| m.and_then(|mid| next.old_to_new[mid]))
                .collect(),
            new_len: next.new_len,
        })
    }

    /// New coordinates outside the image of the map.
    pub fn new_mask(&self) -> ExpansionMask {
        let mut is_new = vec![true; self.new_len];
        for n in self.old_to_new.iter().flatten() {
            is_new[*n] = false;
        }
        ExpansionMask::new(is_new)
    }
}

/// A transformed network plus its alignment to the source network.
#[derive(Debug, Clone)]
pub struct Morphism {
    pub net: DenseNet,
    pub index_map: IndexMap,
    pub mask: ExpansionMask,
}

impl Morphism {
    pub fn identity(net: &DenseNet) -> Self {
        let index_map = IndexMap::identity(net.param_count());
        let mask = index_map.new_mask();
        Morphism {
            net: net.clone(),
            index_map,
            mask,
        }
    }
}

fn check_hidden(net: &DenseNet, index: usize) -> Result<()> {
    let hidden = net.arch().hidden_widths().len();
    if index >= hidden {
        return Err(RecError::InvalidAction(format!(
            "hidden layer {index} does not exist (net has {hidden}); the output layer is fixed"
        )));
    }
    Ok(())
}

/// Widens one hidden layer by uniformly sampled unit replication.
pub fn net2wider(net: &DenseNet, action: WiderAction, max_width: usize, seed: u64) -> Result<Morphism> {
    check_hidden(net, action.layer_index)?;
    let l = action.layer_index;
    let layers = net.layers();
    let old_width = layers[l].fan_out();
    let width = action.new_width;
    if width < old_width {
        return Err(RecError::InvalidAction(format!(
            "cannot narrow layer {l} from {old_width} to {width}"
        )));
    }
    if width > max_width {
        return Err(RecError::InvalidAction(format!(
            "width {width} exceeds cap {max_width}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replica: Vec<usize> = (0..width)
        .map(|j| if j < old_width { j } else { rng.random_range(0..old_width) })
        .collect();
    let mut counts = vec![0usize; old_width];
    for &u in &replica {
        counts[u] += 1;
    }

    let inc = &layers[l];
    let out = &layers[l + 1];
    let fan_in = inc.fan_in();
    let next_out = out.fan_out();
    let new_in = Layer {
        weights: Array2::from_shape_fn((fan_in, width), |(i, j)| inc.weights[[i, replica[j]]]),
        bias: Array1::from_shape_fn(width, |j| inc.bias[replica[j]]),
        activation: inc.activation,
    };
    let new_out = Layer {
        weights: Array2::from_shape_fn((width, next_out), |(j, k)| {
            let u = replica[j];
            out.weights[[u, k]] / counts[u] as f64
        }),
        bias: out.bias.clone(),
        activation: out.activation,
    };
    let mut new_layers = layers.to_vec();
    new_layers[l] = new_in;
    new_layers[l + 1] = new_out;
    let wide = DenseNet::from_layers(new_layers)?;

    let new_off = wide.layer_offsets();
    let mut old_to_new = Vec::with_capacity(net.param_count());
    for (idx, layer) in layers.iter().enumerate() {
        let (rows, cols) = (layer.fan_in(), layer.fan_out());
        let shift = new_off[idx];
        if idx == l {
            for i in 0..rows {
                for u in 0..cols {
                    old_to_new.push(Some(shift + i * width + u));
                }
            }
            for u in 0..cols {
                old_to_new.push(Some(shift + fan_in * width + u));
            }
        } else if idx == l + 1 {
            for u in 0..rows {
                for k in 0..cols {
                    old_to_new.push((counts[u] == 1).then_some(shift + u * cols + k));
                }
            }
            for k in 0..cols {
                old_to_new.push(Some(shift + rows * cols + k));
            }
        } else {
            old_to_new.extend((0..layer.param_count()).map(|p| Some(shift + p)));
        }
    }
    let index_map = IndexMap {
        old_to_new,
        new_len: wide.param_count(),
    };
    let mask = index_map.new_mask();
    Ok(Morphism {
        net: wide,
        index_map,
        mask,
    })
}

/// Inserts an identity ReLU layer after a hidden layer.
pub fn net2deeper(net: &DenseNet, action: DeeperAction) -> Result<Morphism> {
    check_hidden(net, action.insert_after)?;
    let l = action.insert_after;
    let layers = net.layers();
    if layers[l].activation != Activation::Relu {
        return Err(RecError::InvalidAction(
            "identity insertion needs a ReLU layer below it".into(),
        ));
    }
    let width = layers[l].fan_out();
    let mut new_layers = layers.to_vec();
    new_layers.insert(
        l + 1,
        Layer {
            weights: Array2::eye(width),
            bias: Array1::zeros(width),
            activation: Activation::Relu,
        },
    );
    let deep = DenseNet::from_layers(new_layers)?;
    let inserted = width * width + width;
    let split = net.layer_offsets()[l + 1];
    let old_to_new = (0..net.param_count())
        .map(|p| Some(if p < split { p } else { p + inserted }))
        .collect();
    let index_map = IndexMap {
        old_to_new,
        new_len: deep.param_count(),
    };
    let mask = index_map.new_mask();
    Ok(Morphism {
        net: deep,
        index_map,
        mask,
    })
}

/// Applies actions in order, composing index maps and masks.
pub fn apply_actions(
    net: &DenseNet,
    actions: &[Action],
    limits: &TransformLimits,
    seed: u64,
) -> Result<Morphism> {
    let wider = actions.iter().filter(|a| matches!(a, Action::Wider(_))).count();
    let deeper = actions.len() - wider;
    if wider > limits.max_wider {
        return Err(RecError::CapExceeded {
            kind: "wider",
            count: wider,
            cap: limits.max_wider,
        });
    }
    if deeper > limits.max_deeper {
        return Err(RecError::CapExceeded {
            kind: "deeper",
            count: deeper,
            cap: limits.max_deeper,
        });
    }
    let mut current = Morphism::identity(net);
    for (i, action) in actions.iter().enumerate() {
        let step = match *action {
            Action::Wider(a) => {
                net2wider(&current.net, a, limits.max_width, seeds::derive(seed, "wider", i as u64))?
            }
            Action::Deeper(a) => net2deeper(&current.net, a)?,
        };
        let index_map = current.index_map.then(&step.index_map)?;
        current = Morphism {
            mask: index_map.new_mask(),
            net: step.net,
            index_map,
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{init_network, predict_logits};
    use rand_distr::{Distribution, StandardNormal};

    fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn degenerate_widen_is_bit_identical() {
        let net = init_network(&Arch::new(3, vec![2], 2).unwrap(), 4);
        let m = net2wider(&net, WiderAction { layer_index: 0, new_width: 2 }, 8, 0).unwrap();
        assert_eq!(m.net, net);
        assert_eq!(m.mask.count_new(), 0);
    }

    #[test]
    fn widen_single_unit_halves_outgoing() {
        let net = init_network(&Arch::new(3, vec![1], 2).unwrap(), 9);
        let m = net2wider(&net, WiderAction { layer_index: 0, new_width: 2 }, 8, 1).unwrap();
        let old_out = &net.layers()[1].weights;
        let new_out = &m.net.layers()[1].weights;
        for k in 0..2 {
            assert_eq!(new_out[[0, k]], old_out[[0, k]] / 2.0);
            assert_eq!(new_out[[1, k]], old_out[[0, k]] / 2.0);
        }
        let x = random_inputs(100, 3, 2);
        let diff = max_abs_diff(
            &predict_logits(&net, x.view()).unwrap(),
            &predict_logits(&m.net, x.view()).unwrap(),
        );
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn widen_replication_counts() {
        let net = init_network(&Arch::new(3, vec![2, 3], 2).unwrap(), 5);
        for seed in 0..20 {
            let m = net2wider(&net, WiderAction { layer_index: 0, new_width: 4 }, 8, seed).unwrap();
            let new_in = &m.net.layers()[0].weights;
            let old_in = &net.layers()[0].weights;
            let mut counts = [0usize; 2];
            for j in 0..4 {
                let src = (0..2)
                    .find(|&u| (0..3).all(|i| new_in[[i, j]] == old_in[[i, u]]))
                    .expect("each new unit copies an old one");
                counts[src] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), 4);
            assert!(counts.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn widen_rejects_output_and_cap() {
        let net = init_network(&Arch::new(3, vec![2], 2).unwrap(), 5);
        assert!(net2wider(&net, WiderAction { layer_index: 1, new_width: 4 }, 8, 0).is_err());
        assert!(net2wider(&net, WiderAction { layer_index: 0, new_width: 9 }, 8, 0).is_err());
        assert!(net2wider(&net, WiderAction { layer_index: 0, new_width: 1 }, 8, 0).is_err());
    }

    #[test]
    fn deeper_inserts_identity_and_masks_it() {
        let net = init_network(&Arch::new(4, vec![5, 3], 2).unwrap(), 6);
        let m = net2deeper(&net, DeeperAction { insert_after: 1 }).unwrap();
        assert_eq!(m.net.arch().hidden_widths(), &[5, 3, 3]);
        assert_eq!(m.mask.count_new(), 3 * 3 + 3);
        let x = random_inputs(100, 4, 3);
        let diff = max_abs_diff(
            &predict_logits(&net, x.view()).unwrap(),
            &predict_logits(&m.net, x.view()).unwrap(),
        );
        assert!(diff < 1e-12, "{diff}");

        let twice = net2deeper(&m.net, DeeperAction { insert_after: 1 }).unwrap();
        let diff = max_abs_diff(
            &predict_logits(&net, x.view()).unwrap(),
            &predict_logits(&twice.net, x.view()).unwrap(),
        );
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn deeper_rejects_bad_insertion() {
        let net = init_network(&Arch::new(4, vec![5], 2).unwrap(), 6);
        assert!(net2deeper(&net, DeeperAction { insert_after: 1 }).is_err());
        let linear = init_network(&Arch::linear(4, 2).unwrap(), 6);
        assert!(net2deeper(&linear, DeeperAction { insert_after: 0 }).is_err());
    }

    #[test]
    fn apply_actions_caps_and_identity() {
        let net = init_network(&Arch::new(4, vec![5, 3], 2).unwrap(), 6);
        let limits = TransformLimits::for_arch(net.arch());
        let same = apply_actions(&net, &[], &limits, 0).unwrap();
        assert_eq!(same.net, net);
        assert_eq!(same.index_map, IndexMap::identity(net.param_count()));

        let three = [Action::wider(0, 6), Action::wider(1, 4), Action::wider(0, 7)];
        assert!(matches!(
            apply_actions(&net, &three, &limits, 0),
            Err(RecError::CapExceeded { kind: "wider", .. })
        ));
        let four = [Action::deeper(0); 4];
        assert!(matches!(
            apply_actions(&net, &four, &limits, 0),
            Err(RecError::CapExceeded { kind: "deeper", .. })
        ));
    }

    #[test]
    fn wider_then_deeper_preserves_function() {
        let net = init_network(&Arch::new(4, vec![5, 3], 2).unwrap(), 6);
        let limits = TransformLimits::for_arch(net.arch());
        let m = apply_actions(&net, &[Action::wider(1, 6), Action::deeper(1)], &limits, 3).unwrap();
        assert_eq!(m.net.arch().hidden_widths(), &[5, 6, 6]);
        let x = random_inputs(100, 4, 8);
        let diff = max_abs_diff(
            &predict_logits(&net, x.view()).unwrap(),
            &predict_logits(&m.net, x.view()).unwrap(),
        );
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn action_log_round_trip() {
        let actions = vec![Action::wider(0, 200), Action::deeper(1)];
        let text = format_action_log(&actions);
        assert_eq!(text, "W 0 200\nD 1\n");
        assert_eq!(parse_action_log(&format!("# task 2\n{text}\n")).unwrap(), actions);
        assert!(parse_action_log("X 1").is_err());
        assert!(parse_action_log("W 1").is_err());
        assert!(parse_action_log("D 1 2").is_err());
    }

    #[test]
    fn arch_only_application_matches_weights() {
        let net = init_network(&Arch::new(4, vec![5, 3], 2).unwrap(), 6);
        let action = Action::deeper(0);
        let m = net2deeper(&net, DeeperAction { insert_after: 0 }).unwrap();
        assert_eq!(&action.apply_to_arch(net.arch()).unwrap(), m.net.arch());
    }
}
