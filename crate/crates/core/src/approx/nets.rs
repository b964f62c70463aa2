use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{polyak_update, Adam, Mlp, NetError, OutputActivation};
use crate::backup::{asymmetric_loss, asymmetric_loss_grad, clipped_q};

/// Number of critic networks: `(Q1_A, Q1_B, Q2_A, Q2_B)`.
pub const CRITIC_MEMBERS: usize = 4;

/// Which critic drives the actor update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorObjective {
    /// `Q1_A` alone.
    #[default]
    FirstMember,
    /// `min(Q1_A, Q1_B)`, differentiated through the smaller member.
    Clipped,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Deterministic policy: a tanh network rescaled onto the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    net: Mlp,
    bounds: Vec<(f64, f64)>,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        bounds: &[(f64, f64)],
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let net = Mlp::new(&layer_sizes(state_dim, hidden, bounds.len()), OutputActivation::Tanh, rng)?;
        Ok(Self {
            net,
            bounds: bounds.to_vec(),
        })
    }

    pub fn from_net(net: Mlp, bounds: &[(f64, f64)]) -> Result<Self, NetError> {
        if net.output_dim() != bounds.len() {
            return Err(NetError::ShapeMismatch {
                left: net.sizes().to_vec(),
                right: vec![bounds.len()],
            });
        }
        Ok(Self {
            net,
            bounds: bounds.to_vec(),
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    fn rescale(&self, squashed: &mut [f64]) {
        let k = self.bounds.len();
        for (i, y) in squashed.iter_mut().enumerate() {
            let (lo, hi) = self.bounds[i % k];
            *y = lo + 0.5 * (*y + 1.0) * (hi - lo);
        }
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>, NetError> {
        self.act_batch(state, 1)
    }

    pub fn act_batch(&self, states: &[f64], batch: usize) -> Result<Vec<f64>, NetError> {
        let mut out = self.net.forward_batch(states, batch)?;
        self.rescale(&mut out);
        Ok(out)
    }
}

/// Two twin critics, each a clipped pair, plus target copies and optimizers.
///
/// Member `2 * twin + k` is `Q^(twin+1)_{A,B}[k]`. Every critic maps the
/// concatenation `[state, action]` to a scalar.
#[derive(Debug, Clone)]
pub struct TwinCritic {
    online: Vec<Mlp>,
    target: Vec<Mlp>,
    opts: Vec<Adam>,
    state_dim: usize,
    action_dim: usize,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let sizes = layer_sizes(state_dim + action_dim, hidden, 1);
        let online = (0..CRITIC_MEMBERS)
            .map(|_| Mlp::new(&sizes, OutputActivation::Identity, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_members(online, state_dim, action_dim, lr)
    }

    /// Wrap existing online networks; targets start as exact copies.
    pub fn from_members(online: Vec<Mlp>, state_dim: usize, action_dim: usize, lr: f64) -> Result<Self, NetError> {
        if online.len() != CRITIC_MEMBERS {
            return Err(NetError::Architecture(vec![online.len()]));
        }
        for net in &online {
            if net.input_dim() != state_dim + action_dim || net.output_dim() != 1 || !net.same_shape(&online[0]) {
                return Err(NetError::ShapeMismatch {
                    left: net.sizes().to_vec(),
                    right: online[0].sizes().to_vec(),
                });
            }
        }
        let opts = online.iter().map(|n| Adam::new(n.num_params(), lr)).collect();
        Ok(Self {
            target: online.clone(),
            online,
            opts,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn member(&self, i: usize) -> &Mlp {
        &self.online[i]
    }

    pub fn member_mut(&mut self, i: usize) -> &mut Mlp {
        &mut self.online[i]
    }

    pub fn target_member(&self, i: usize) -> &Mlp {
        &self.target[i]
    }

    pub fn target_member_mut(&mut self, i: usize) -> &mut Mlp {
        &mut self.target[i]
    }

    /// Row-major `[state, action]` rows.
    pub fn join(&self, states: &[f64], actions: &[f64], batch: usize) -> Vec<f64> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        debug_assert_eq!(states.len(), batch * sd);
        debug_assert_eq!(actions.len(), batch * ad);
        let mut out = Vec::with_capacity(batch * (sd + ad));
        for i in 0..batch {
            out.extend_from_slice(&states[i * sd..(i + 1) * sd]);
            out.extend_from_slice(&actions[i * ad..(i + 1) * ad]);
        }
        out
    }

    fn nets(&self, use_target: bool) -> &[Mlp] {
        if use_target {
            &self.target
        } else {
            &self.online
        }
    }

    /// `min(Q_A, Q_B)` of one twin (0 or 1) over a batch of joined inputs.
    pub fn clipped_batch(&self, twin: usize, inputs: &[f64], batch: usize, use_target: bool) -> Result<Vec<f64>, NetError> {
        let nets = self.nets(use_target);
        let a = nets[2 * twin].forward_batch(inputs, batch)?;
        let b = nets[2 * twin + 1].forward_batch(inputs, batch)?;
        Ok(a.iter().zip(&b).map(|(&x, &y)| clipped_q(x, y)).collect())
    }

    pub fn clipped(&self, twin: usize, state: &[f64], action: &[f64]) -> Result<f64, NetError> {
        let input = self.join(state, action, 1);
        Ok(self.clipped_batch(twin, &input, 1, false)?[0])
    }

    /// Clipped values of both twins.
    pub fn both_clipped(&self, inputs: &[f64], batch: usize, use_target: bool) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        Ok((
            self.clipped_batch(0, inputs, batch, use_target)?,
            self.clipped_batch(1, inputs, batch, use_target)?,
        ))
    }

    /// One Adam step on both members of `twin`, each regressing toward
    /// `targets` under the asymmetric loss. Returns the mean loss of the two.
    pub fn regress(&mut self, twin: usize, inputs: &[f64], targets: &[f64], alpha: f64) -> Result<f64, NetError> {
        let batch = targets.len();
        let mut total = 0.0;
        for k in 0..2 {
            let i = 2 * twin + k;
            let (loss, grad) = self.online[i].gradient(inputs, batch, |s, out| {
                (
                    asymmetric_loss(out[0], targets[s], alpha),
                    vec![asymmetric_loss_grad(out[0], targets[s], alpha)],
                )
            })?;
            self.opts[i].step(self.online[i].params_mut(), &grad);
            total += loss;
        }
        Ok(total / 2.0)
    }

    pub fn polyak(&mut self, tau: f64) -> Result<(), NetError> {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            polyak_update(t, o, tau)?;
        }
        Ok(())
    }
}

/// Deterministic policy gradient.
///
/// Returns the mean critic value `J = mean_s Q(s, pi(s))` and the gradient of
/// `-J` with respect to the actor parameters, so a descent step on it is an
/// ascent step on `J`.
pub fn dpg_actor_gradient(
    actor: &Actor,
    critic: &TwinCritic,
    states: &[f64],
    batch: usize,
    objective: ActorObjective,
) -> Result<(f64, Vec<f64>), NetError> {
    dpg_with(actor, states, batch, |actions| {
        let inputs = critic.join(states, actions, batch);
        let scale = 1.0 / batch as f64;
        let tape_a = critic.online[0].forward_tape(&inputs, batch)?;
        let (value, d_inputs) = match objective {
            ActorObjective::FirstMember => {
                let j = tape_a.output().iter().sum::<f64>() * scale;
                (j, critic.online[0].backward_input(&tape_a, &vec![scale; batch]))
            }
            ActorObjective::Clipped => {
                let tape_b = critic.online[1].forward_tape(&inputs, batch)?;
                let (qa, qb) = (tape_a.output(), tape_b.output());
                let mut da = vec![0.0; batch];
                let mut db = vec![0.0; batch];
                let mut j = 0.0;
                for i in 0..batch {
                    j += clipped_q(qa[i], qb[i]);
                    if qa[i] <= qb[i] {
                        da[i] = scale;
                    } else {
                        db[i] = scale;
                    }
                }
                let mut d = critic.online[0].backward_input(&tape_a, &da);
                for (x, y) in d.iter_mut().zip(critic.online[1].backward_input(&tape_b, &db)) {
                    *x += y;
                }
                (j * scale, d)
            }
        };
        let (sd, ad) = (critic.state_dim, critic.action_dim);
        let d_actions = (0..batch)
            .flat_map(|i| d_inputs[i * (sd + ad) + sd..(i + 1) * (sd + ad)].iter().copied())
            .collect();
        Ok((value, d_actions))
    })
}

/// Policy gradient through an arbitrary differentiable critic.
///
/// `critic` receives the batch of actions `pi(s)` and returns `J` together
/// with `dJ/da` for every row. The result is `(J, d(-J)/d(actor params))`.
pub fn dpg_with<F>(actor: &Actor, states: &[f64], batch: usize, critic: F) -> Result<(f64, Vec<f64>), NetError>
where
    F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>), NetError>,
{
    if batch == 0 {
        return Err(NetError::EmptyBatch);
    }
    let tape = actor.net.forward_tape(states, batch)?;
    let mut actions = tape.output().to_vec();
    actor.rescale(&mut actions);
    let (value, d_actions) = critic(&actions)?;
    if !value.is_finite() {
        return Err(NetError::NonFiniteLoss {
            sample: 0,
            loss: -value,
            output: actions,
        });
    }
    let ad = actor.action_dim();
    let d_squashed: Vec<f64> = d_actions
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (lo, hi) = actor.bounds[i % ad];
            -g * 0.5 * (hi - lo)
        })
        .collect();
    let mut grad = vec![0.0; actor.net.num_params()];
    actor.net.backward(&tape, &d_squashed, &mut grad);
    Ok((value, grad))
}
