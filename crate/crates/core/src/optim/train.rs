//! Training driver: round-robin views, Adam, scheduled densification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::{remap, AdamState, LearningRates};
use super::losses::{loss_total, LossBreakdown, LossWeights};
use super::model::{Heads, Model, ModelConfig};
use crate::diffcore::{softplus, softplus_inv, Bound, ParamId, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featpipe::MultiViewFeatures;
use crate::interact::knn;
use crate::raster::RasterConfig;
use crate::scene::{unit_quat_to_rot, Camera};
use crate::workbench::metrics::psnr_slices;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub start: usize,
    pub every: usize,
    /// Last iteration that may densify; `None` means half the run.
    pub until: Option<usize>,
    /// Mean view-space gradient norm above which a point is densified.
    pub grad_threshold: f64,
    /// Points whose largest scale is at most this fraction of the extent are
    /// cloned, larger ones split.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Points larger than this fraction of the extent are pruned.
    pub big_scale: f64,
    pub min_points: usize,
    pub max_points: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            start: 500,
            every: 100,
            until: None,
            grad_threshold: 5e-3,
            percent_dense: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            big_scale: 0.1,
            min_points: 16,
            max_points: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub model: ModelConfig,
    pub densify: DensifyConfig,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 10_000,
            seed: 0,
            threads: 0,
            model: ModelConfig::default(),
            densify: DensifyConfig::default(),
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            raster: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.loss.validate()?;
        let d = &self.densify;
        if d.every == 0 {
            return Err(Error::Config("densify_every must be at least 1".into()));
        }
        if d.enabled && d.start >= self.iters {
            return Err(Error::Config(format!(
                "densify_start {} must be below the iteration count {} (or disable densification)",
                d.start, self.iters
            )));
        }
        if d.split_factor <= 1.0 || d.min_points == 0 || d.max_points < d.min_points {
            return Err(Error::Config(format!("invalid densification settings: {d:?}")));
        }
        Ok(())
    }

    pub fn densify_until(&self) -> usize {
        self.densify.until.unwrap_or(self.iters / 2)
    }
}

/// One training view with its depth prior.
#[derive(Clone, Debug)]
pub struct TrainView<T> {
    pub camera: Camera,
    /// `[H, W, 3]`
    pub image: Tensor<T>,
    /// `[H, W]`
    pub depth: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub views: Vec<TrainView<T>>,
    pub init_points: Vec<[f64; 3]>,
}

impl<T: Real> TrainData<T> {
    /// 1.1 × the largest distance of a camera center from their mean, or 1
    /// for a single view.
    pub fn extent(&self) -> f64 {
        let centers: Vec<[f64; 3]> = self.views.iter().map(|v| v.camera.center()).collect();
        let n = centers.len() as f64;
        let mean = [0, 1, 2].map(|k| centers.iter().map(|c| c[k]).sum::<f64>() / n);
        let r = centers
            .iter()
            .map(|c| ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if r > 1e-9 {
            1.1 * r
        } else {
            1.0
        }
    }

    fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("training needs at least one view".into()));
        }
        if self.init_points.is_empty() {
            return Err(Error::Config("training needs a nonempty initial point cloud".into()));
        }
        for v in &self.views {
            let (h, w) = (v.camera.height, v.camera.width);
            if v.image.shape() != [h, w, 3] || v.depth.len() != h * w {
                return Err(Error::Shape(format!(
                    "view {} has image {:?} and depth {:?} for a {w}x{h} camera",
                    v.camera.id,
                    v.image.shape(),
                    v.depth.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub train_psnr: f64,
    pub points: usize,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iter,l1,ssim,l_depth,l_smooth,total,train_psnr,points";

    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, l.l1, l.ssim, l.depth, l.smooth, l.total, self.train_psnr, self.points
        )
    }
}

/// What one densification pass did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Clone, Copy, Debug)]
enum RowPlan {
    Keep(usize),
    Clone(usize),
    /// Child of a split parent at a new position.
    Split(usize, [f64; 3]),
}

impl RowPlan {
    fn parent(self) -> usize {
        match self {
            RowPlan::Keep(i) | RowPlan::Clone(i) | RowPlan::Split(i, _) => i,
        }
    }
}

pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub data: TrainData<T>,
    pub extent: f64,
    pub iter: usize,
    features: Option<MultiViewFeatures<T>>,
    /// Where each point's multi-view features are sampled: its position
    /// when it was created.
    sample_points: Vec<[f64; 3]>,
    /// Fused features when the encoder is not trained.
    frozen_base: Option<Tensor<T>>,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, data: TrainData<T>) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let extent = data.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let points = &data.init_points.clone();
        let spacing = knn(points, 3).mean_distance(points);
        let mean_spacing = spacing.iter().sum::<f64>() / spacing.len() as f64;
        let init_scale = if mean_spacing > 1e-9 { mean_spacing } else { 0.01 * extent };
        let model = Model::new(config.model.clone(), points, init_scale, &mut rng)?;
        let mut features = None;
        let mut frozen_base = None;
        if let Some(enc) = model.encoder() {
            let mut mvf = MultiViewFeatures::new(
                enc.clone(),
                data.views.iter().map(|v| v.image.clone()).collect(),
                data.views.iter().map(|v| v.camera.clone()).collect(),
                config.model.fusion,
                config.raster.near,
            )?;
            mvf.set_points(points)?;
            if !config.model.train_encoder {
                frozen_base = Some(mvf.compute(&model.store)?);
            }
            features = Some(mvf);
        }
        let adam = AdamState::new(&model.store);
        let m = model.len();
        Ok(Trainer {
            config,
            model,
            adam,
            data,
            extent,
            iter: 0,
            features,
            sample_points: points.clone(),
            frozen_base,
            grad_accum: vec![0.0; m],
            grad_count: vec![0; m],
            rng,
        })
    }

    /// Fused multi-view features on `tape`, if the model uses them.
    fn base<'t>(&self, tape: &'t Tape<T>, p: &Bound<'t, T>) -> Result<Option<Var<'t, T>>> {
        Ok(match (&self.features, &self.frozen_base) {
            (_, Some(frozen)) => Some(tape.constant(frozen.clone())),
            (Some(mvf), None) => Some(mvf.forward(tape, p)?),
            (None, None) => None,
        })
    }

    fn base_values(&self) -> Result<Option<Tensor<T>>> {
        Ok(match (&self.features, &self.frozen_base) {
            (_, Some(frozen)) => Some(frozen.clone()),
            (Some(mvf), None) => Some(mvf.compute(&self.model.store)?),
            (None, None) => None,
        })
    }

    /// A self-contained copy of the model with the fused features folded
    /// into the per-point feature parameter.
    pub fn baked_model(&self) -> Result<Model<T>> {
        let mut model = self.model.clone();
        if let (Some(base), Some(id)) = (self.base_values()?, model.feature_param()) {
            model.store.get_mut(id).add_assign(&base);
        }
        Ok(model)
    }

    fn effective_lr(&self) -> LearningRates {
        LearningRates { position: self.config.lr.position * self.extent, ..self.config.lr }
    }

    /// One optimization step on the next view in round-robin order.
    pub fn step(&mut self) -> Result<MetricsRow> {
        self.iter += 1;
        let view = &self.data.views[(self.iter - 1) % self.data.views.len()];
        let tape = Tape::new();
        tape.set_check_finite(false);
        let p = self.model.store.bind(&tape);
        let base = self.base(&tape, &p)?;
        let (out, op, _) = self.model.render_var(&p, &view.camera, &self.config.raster, base)?;
        let (loss, breakdown) = loss_total(out, &view.image, &view.depth, &self.config.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { iter: self.iter, detail: format!("{breakdown:?}") });
        }
        let rgb: Vec<T> = out.value().data().chunks(5).flat_map(|px| [px[0], px[1], px[2]]).collect();
        let train_psnr = psnr_slices(&rgb, view.image.data());
        tape.backward(loss)?;
        let grads = p.grads();
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite {
                iter: self.iter,
                detail: format!(
                    "gradient of {} is not finite; losses {breakdown:?}",
                    self.model.store.param(self.model.store.ids()[i]).name
                ),
            });
        }
        drop(p);
        let lr = self.effective_lr();
        self.adam.step(&mut self.model.store, &grads, &lr)?;

        let d = &self.config.densify;
        let until = self.config.densify_until();
        if d.enabled && self.iter <= until {
            if let Some((norms, visible)) = op.take_viewspace() {
                for (i, (g, v)) in norms.iter().zip(&visible).enumerate() {
                    if *v {
                        self.grad_accum[i] += g.f64();
                        self.grad_count[i] += 1;
                    }
                }
            }
            if self.iter >= d.start && self.iter.is_multiple_of(d.every) {
                self.densify()?;
            }
        }
        Ok(MetricsRow { iter: self.iter, loss: breakdown, train_psnr, points: self.model.len() })
    }

    /// Runs the remaining iterations, reporting each row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        while self.iter < self.config.iters {
            let row = self.step()?;
            on_row(&row)?;
        }
        Ok(())
    }

    /// Mean view-space gradient norm per point since the last densification.
    pub fn viewspace_means(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.grad_count)
            .map(|(a, &c)| if c > 0 { a / c as f64 } else { 0.0 })
            .collect()
    }

    /// Decoded opacity and largest world scale per point, averaged over the
    /// training views, plus each point's scale and rotation from the first
    /// view for sampling split children.
    fn point_stats(&self) -> Result<(Vec<f64>, Vec<f64>, Vec<[f64; 3]>, Vec<[[f64; 3]; 3]>)> {
        let m = self.model.len();
        let mut opacity = vec![0.0; m];
        let mut max_scale = vec![0.0; m];
        let mut scales = Vec::new();
        let mut rots = Vec::new();
        let n = self.data.views.len() as f64;
        let base = self.base_values()?;
        for (k, v) in self.data.views.iter().enumerate() {
            let tape = Tape::new();
            tape.set_check_finite(false);
            let p = self.model.store.bind(&tape);
            let a = self.model.attributes(&p, &v.camera, base.clone().map(|b| tape.constant(b)))?;
            let (o, s, q) = (a.opacity.value(), a.scale.value(), a.quat.value());
            for i in 0..m {
                opacity[i] += o.data()[i].f64() / n;
                let row = s.row(i);
                let sm = row.iter().map(|x| x.f64()).fold(0.0, f64::max);
                max_scale[i] += sm / n;
                if k == 0 {
                    scales.push([row[0].f64(), row[1].f64(), row[2].f64()]);
                    let qr = q.row(i);
                    rots.push(unit_quat_to_rot([qr[0].f64(), qr[1].f64(), qr[2].f64(), qr[3].f64()]));
                }
            }
        }
        Ok((opacity, max_scale, scales, rots))
    }

    /// Clone or split points with a large mean view-space gradient, then
    /// prune faint and oversized points.
    pub fn densify(&mut self) -> Result<DensifyReport> {
        let d = self.config.densify.clone();
        let m = self.model.len();
        let (opacity, max_scale, scales, rots) = self.point_stats()?;
        let points = self.model.points();
        let mut plan = Vec::with_capacity(m);
        let mut report = DensifyReport::default();
        let mut budget = d.max_points.saturating_sub(m);
        for (i, g) in self.viewspace_means().into_iter().enumerate() {
            if g <= d.grad_threshold || budget == 0 {
                plan.push(RowPlan::Keep(i));
            } else if max_scale[i] <= d.percent_dense * self.extent {
                plan.push(RowPlan::Keep(i));
                plan.push(RowPlan::Clone(i));
                report.cloned += 1;
                budget -= 1;
            } else {
                for _ in 0..2 {
                    let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut self.rng));
                    let local = [0, 1, 2].map(|k| scales[i][k] * z[k]);
                    let r = &rots[i];
                    let pos = [0, 1, 2].map(|a| points[i][a] + (0..3).map(|b| r[a][b] * local[b]).sum::<f64>());
                    plan.push(RowPlan::Split(i, pos));
                }
                report.split += 1;
                budget -= 1;
            }
        }

        let shrink = |row: &RowPlan| if matches!(row, RowPlan::Split(..)) { 1.0 / d.split_factor } else { 1.0 };
        let doomed = |row: &RowPlan| {
            let i = row.parent();
            opacity[i] < d.prune_opacity || max_scale[i] * shrink(row) > d.big_scale * self.extent
        };
        let mut keep: Vec<RowPlan> = plan.iter().copied().filter(|r| !doomed(r)).collect();
        if keep.len() < d.min_points.min(plan.len()) {
            let mut order: Vec<usize> = (0..plan.len()).collect();
            order.sort_by(|&a, &b| opacity[plan[b].parent()].total_cmp(&opacity[plan[a].parent()]).then(a.cmp(&b)));
            let mut chosen = order[..d.min_points.min(plan.len())].to_vec();
            chosen.sort_unstable();
            keep = chosen.into_iter().map(|k| plan[k]).collect();
        }
        report.pruned = plan.len() - keep.len();
        self.apply_plan(&keep, &points)?;
        Ok(report)
    }

    fn apply_plan(&mut self, plan: &[RowPlan], points: &[[f64; 3]]) -> Result<()> {
        let n = plan.len();
        let sources: Vec<Option<usize>> =
            plan.iter().map(|r| if let RowPlan::Keep(i) = r { Some(*i) } else { None }).collect();
        let parents: Vec<Option<usize>> = plan.iter().map(|r| Some(r.parent())).collect();
        let split_factor = self.config.densify.split_factor;

        for id in self.model.per_point_ids() {
            let old = self.model.store.get(id).clone();
            let mut t = remap(&old, &parents, T::zero());
            if id == self.model.mu {
                for (r, row) in plan.iter().enumerate() {
                    if let RowPlan::Split(_, pos) = row {
                        t.row_mut(r).iter_mut().zip(pos).for_each(|(x, p)| *x = T::lit(*p));
                    }
                }
            } else if self.is_sh_scale(id) {
                for (r, row) in plan.iter().enumerate() {
                    if let RowPlan::Split(..) = row {
                        for x in t.row_mut(r) {
                            *x = T::lit(softplus_inv(softplus(x.f64()) / split_factor));
                        }
                    }
                }
            }
            *self.model.store.get_mut(id) = t;
            self.adam.remap_rows(id, &sources);
        }
        if matches!(self.model.heads, Heads::Features { .. }) {
            let old = std::mem::take(&mut self.model.scale_mult);
            self.model.scale_mult = plan
                .iter()
                .map(|r| match r {
                    RowPlan::Split(i, _) => old[*i] / split_factor,
                    _ => old[r.parent()],
                })
                .collect();
        } else {
            self.model.scale_mult = vec![1.0; n];
        }
        // untouched points keep their sampling location; densified parents
        // and their children resample at their current centers
        let mut cloned = vec![false; points.len()];
        for r in plan {
            if let RowPlan::Clone(i) = r {
                cloned[*i] = true;
            }
        }
        self.sample_points = plan
            .iter()
            .map(|r| match r {
                RowPlan::Keep(i) if !cloned[*i] => self.sample_points[*i],
                RowPlan::Keep(i) | RowPlan::Clone(i) => points[*i],
                RowPlan::Split(_, pos) => *pos,
            })
            .collect();
        if let Some(mvf) = &mut self.features {
            mvf.set_points(&self.sample_points)?;
            if self.frozen_base.is_some() {
                self.frozen_base = Some(mvf.compute(&self.model.store)?);
            }
        }
        self.grad_accum = vec![0.0; n];
        self.grad_count = vec![0; n];
        Ok(())
    }

    fn is_sh_scale(&self, id: ParamId) -> bool {
        matches!(self.model.heads, Heads::Sh { scale, .. } if scale == id)
    }
}

/// Train to completion, honoring the configured thread count.
pub fn train<T: Real + Send>(
    config: TrainConfig,
    data: TrainData<T>,
    on_row: impl FnMut(&MetricsRow) -> Result<()> + Send,
) -> Result<Model<T>> {
    let threads = config.threads;
    let run = move || -> Result<Model<T>> {
        let mut t = Trainer::new(config, data)?;
        t.run(on_row)?;
        t.baked_model()
    };
    if threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?
        .install(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::synth::{gen_scene, RigSpec};

    fn small(seed: u64, gaussians: usize) -> TrainData<f32> {
        let rig = RigSpec { views: 4, train_views: 2, size: 24, ..RigSpec::default() };
        gen_scene(seed, gaussians, &rig).unwrap().1.train_data()
    }

    fn quick(iters: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { iters, seed, ..TrainConfig::default() };
        cfg.densify.enabled = false;
        cfg
    }

    #[test]
    fn single_gaussian_overfits_one_view() {
        let rig = RigSpec { views: 3, train_views: 1, size: 32, ..RigSpec::default() };
        let (scene, ds) = gen_scene(5, 1, &rig).unwrap();
        let mut data: TrainData<f32> = ds.train_data();
        let m = scene.cloud.mu.data();
        data.init_points = vec![[m[0] + 0.02, m[1] - 0.01, m[2]]];
        let mut cfg = quick(200, 1);
        cfg.model.k_neighbors = 0;
        let mut t = Trainer::new(cfg, data).unwrap();
        let mut last = 0.0;
        t.run(|r| {
            last = r.train_psnr;
            Ok(())
        })
        .unwrap();
        assert!(last > 30.0, "train psnr {last}");
    }

    #[test]
    fn same_seed_same_rows() {
        let run = || {
            let mut rows = Vec::new();
            let mut cfg = quick(30, 3);
            cfg.densify = DensifyConfig { enabled: true, start: 10, every: 10, ..DensifyConfig::default() };
            let mut t = Trainer::new(cfg, small(2, 30)).unwrap();
            t.run(|r| {
                rows.push(r.csv());
                Ok(())
            })
            .unwrap();
            rows
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_goes_down() {
        for seed in [1, 2, 3] {
            let mut totals = Vec::new();
            let mut t = Trainer::new(quick(100, seed), small(seed, 30)).unwrap();
            t.run(|r| {
                totals.push(r.loss.total);
                Ok(())
            })
            .unwrap();
            let head: f64 = totals[..10].iter().sum();
            let tail: f64 = totals[90..].iter().sum();
            assert!(tail < head, "seed {seed}: {head} -> {tail}");
        }
    }

    #[test]
    fn non_finite_parameters_abort() {
        let mut t = Trainer::new(quick(10, 1), small(1, 20)).unwrap();
        let mu = t.model.mu;
        t.model.store.get_mut(mu).data_mut()[0] = f32::NAN;
        match t.step() {
            Err(Error::NonFinite { iter: 1, .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn densify_without_signal_only_prunes() {
        let mut t = Trainer::new(quick(10, 1), small(4, 30)).unwrap();
        t.config.densify.prune_opacity = 0.0;
        t.config.densify.big_scale = f64::INFINITY;
        let before = t.model.store.get(t.model.mu).clone();
        let report = t.densify().unwrap();
        assert_eq!(report, DensifyReport::default());
        assert_eq!(t.model.store.get(t.model.mu), &before);
    }

    #[test]
    fn densify_clones_small_and_splits_large() {
        let mut t = Trainer::new(quick(10, 1), small(4, 30)).unwrap();
        t.config.densify.prune_opacity = 0.0;
        t.config.densify.big_scale = f64::INFINITY;
        let m = t.model.len();
        let points = t.model.points();
        t.grad_accum[3] = 1.0;
        t.grad_count[3] = 1;
        t.config.densify.percent_dense = 1e9;
        let report = t.densify().unwrap();
        assert_eq!((report.cloned, report.split, report.pruned), (1, 0, 0));
        assert_eq!(t.model.len(), m + 1);
        assert_eq!(t.model.points()[4], points[3]);
        assert_eq!(t.sample_points[3], points[3]);
        assert_eq!(t.sample_points[4], points[3]);
        assert_eq!(t.model.scale_mult.len(), m + 1);
        assert!(t.grad_accum.iter().all(|&g| g == 0.0));

        t.grad_accum[0] = 1.0;
        t.grad_count[0] = 1;
        t.config.densify.percent_dense = 0.0;
        let report = t.densify().unwrap();
        assert_eq!((report.cloned, report.split, report.pruned), (0, 1, 0));
        assert_eq!(t.model.len(), m + 2);
        assert_eq!(t.sample_points.len(), m + 2);
        assert!((t.model.scale_mult[0] - 1.0 / 1.6).abs() < 1e-12);
        t.step().unwrap();
    }

    #[test]
    fn pruning_keeps_a_floor() {
        let mut t = Trainer::new(quick(10, 1), small(4, 30)).unwrap();
        t.config.densify.prune_opacity = 2.0;
        let m = t.model.len();
        let report = t.densify().unwrap();
        assert_eq!(t.model.len(), 16);
        assert_eq!(report.pruned, m - 16);
        t.step().unwrap();
    }
}
