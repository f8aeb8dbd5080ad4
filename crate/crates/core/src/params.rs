//! Parameter storage, initialization and the Adam optimizer.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The six independently owned weight sets of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    GeometryExtractor,
    MotionExtractor,
    GeometryRegularizer,
    MotionRegularizer,
    StaticField,
    DynamicField,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::GeometryExtractor,
        ParamGroup::MotionExtractor,
        ParamGroup::GeometryRegularizer,
        ParamGroup::MotionRegularizer,
        ParamGroup::StaticField,
        ParamGroup::DynamicField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::GeometryExtractor => "geometry_extractor",
            ParamGroup::MotionExtractor => "motion_extractor",
            ParamGroup::GeometryRegularizer => "geometry_regularizer",
            ParamGroup::MotionRegularizer => "motion_regularizer",
            ParamGroup::StaticField => "static_field",
            ParamGroup::DynamicField => "dynamic_field",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Buffers (normalization running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.push(name.into(), group, value, false)
    }

    fn push(&mut self, name: String, group: ParamGroup, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            group,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = value;
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].group == group).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// Uniform initialization in `±sqrt(6 / fan_in)`.
pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

/// Uniform initialization in `±bound`.
pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |e: &ParamEntry| Tensor::zeros(e.value.shape().to_vec());
        Self {
            config,
            step: 0,
            first_moment: store.entries().iter().map(zeros).collect(),
            second_moment: store.entries().iter().map(zeros).collect(),
        }
    }

    /// Applies one update. Parameters absent from `grads` are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let m = self.first_moment[id.0].data_mut();
            let v = self.second_moment[id.0].data_mut();
            let p = store.value_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::StaticField, Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, &[(id, Tensor::new(vec![2], vec![3.0, -0.5]))]);
        let v = store.value(id).data();
        assert!((v[0] - (1.0 - 5e-4)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 5e-4)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::DynamicField, Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        let before = store.value(id).clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2 {
            adam.update(&mut store, &[(id, Tensor::zeros(vec![3]))]);
        }
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut store = ParamStore::new();
        let id = store.add_buffer("bn.mean", ParamGroup::GeometryExtractor, Tensor::zeros(vec![1]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, &[(id, Tensor::ones(vec![1]))]);
        assert_eq!(store.value(id).data(), &[0.0]);
    }
}
