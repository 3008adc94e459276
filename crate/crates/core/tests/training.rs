use s2st::nn::{Builder, Graph, Linear, ParamStore};
use s2st::rng::{normal_vec, seeded};
use s2st::training::{Checkpoint, RunStatus, TrainConfig, TrainState, TrainTask, Trainer};
use s2st::{Result, Tensor, Var};

/// Linear regression onto a fixed random target map.
struct Regression {
    store: ParamStore,
    layer: Linear,
    xs: Vec<Tensor>,
    ys: Vec<Tensor>,
}

impl Regression {
    fn new(seed: u64, n: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let layer = Linear::new(&mut Builder::new(&mut store, &mut rng), "lin", 3, 2);
        let w = normal_vec(&mut rng, 6, 1.0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let x = normal_vec(&mut rng, 3, 1.0);
            let y = vec![
                w[0] * x[0] + w[1] * x[1] + w[2] * x[2],
                w[3] * x[0] + w[4] * x[1] + w[5] * x[2],
            ];
            xs.push(Tensor::new(vec![1, 3], x).unwrap());
            ys.push(Tensor::new(vec![1, 2], y).unwrap());
        }
        Self { store, layer, xs, ys }
    }

    fn loss_of(&self, g: &mut Graph<'_>, i: usize) -> Result<Var> {
        let x = g.constant(self.xs[i].clone());
        let y = g.constant(self.ys[i].clone());
        let p = self.layer.forward(g, x)?;
        g.mse(p, y)
    }
}

impl TrainTask for Regression {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn train_len(&self) -> usize {
        self.xs.len() - 8
    }
    fn example_loss(&self, g: &mut Graph<'_>, i: usize) -> Result<(Var, [f64; 2])> {
        let l = self.loss_of(g, i)?;
        let v = g.item(l);
        Ok((l, [v, 0.0]))
    }
    fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for i in self.train_len()..self.xs.len() {
            let mut g = Graph::new(&self.store);
            let l = self.loss_of(&mut g, i)?;
            total += g.item(l);
        }
        Ok(total / 8.0)
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        batch_size: 4,
        warmup_steps: 5,
        validate_every: 7,
        max_epochs: 6,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases() {
    let mut task = Regression::new(1, 48);
    let before = task.validation_loss().unwrap();
    let trainer = Trainer::new(cfg()).unwrap();
    let state = trainer.train(&mut task).unwrap();
    let after = task.validation_loss().unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert_eq!(state.best_val(), Some(after));
}

#[test]
fn identical_seeds_identical_logs() {
    let trainer = Trainer::new(cfg()).unwrap();
    let mut a = Regression::new(1, 48);
    let mut b = Regression::new(1, 48);
    let sa = trainer.train(&mut a).unwrap();
    let sb = trainer.train(&mut b).unwrap();
    assert_eq!(sa.losses, sb.losses);
    assert_eq!(a.store, b.store);
}

#[test]
fn resume_is_bit_exact() {
    let trainer = Trainer::new(cfg()).unwrap();
    let mut full = Regression::new(1, 48);
    let full_state = trainer.train(&mut full).unwrap();

    let mut part = Regression::new(1, 48);
    let mut state = TrainState::new(part.params());
    assert_eq!(trainer.run(&mut part, &mut state, Some(13)).unwrap(), RunStatus::Paused);
    let bytes = state.to_checkpoint(part.params(), &trainer.cfg).to_bytes();

    let mut resumed = Regression::new(1, 48);
    // scramble to prove the checkpoint restores everything
    resumed.store.get_mut(resumed.layer.w).data_mut().fill(9.0);
    let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let (mut state, cfg) = TrainState::from_checkpoint(&ck, resumed.params_mut()).unwrap();
    assert_eq!(cfg, trainer.cfg);
    trainer.run(&mut resumed, &mut state, None).unwrap();
    assert_eq!(state.losses, full_state.losses);
    for id in full.store.ids() {
        let a: Vec<u64> = full.store.get(id).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = resumed.store.get(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn best_checkpoint_never_worse_than_earlier_validations() {
    let mut task = Regression::new(2, 48);
    let trainer = Trainer::new(TrainConfig { lr: 0.5, ..cfg() }).unwrap();
    let state = trainer.train(&mut task).unwrap();
    let best = state.best_val().unwrap();
    for v in &state.validations {
        assert!(best <= v.val_loss);
    }
}

#[test]
fn nan_loss_aborts_with_numeric_error() {
    let mut task = Regression::new(1, 48);
    task.xs[0].data_mut()[0] = f64::NAN;
    let trainer = Trainer::new(TrainConfig { batch_size: 40, ..cfg() }).unwrap();
    let err = trainer.train(&mut task).unwrap_err();
    assert!(matches!(err, s2st::Error::Numeric(_)), "{err}");
}
