//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7, 8 and 10 need full desk-scale training runs. Their cost is
//! projected from a measured training sample; they run when the projection
//! fits [`BUDGET_SECONDS`] or when `CMS_ACCEPTANCE_FULL=1` is set, and fail
//! with the projection otherwise.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use cms_lstm::ablation::{run_variant, Protocol, RunResult, Variant};
use cms_lstm::cells::{bam, CeBlock, CellState, CmsCell, CmsModel, Qkv, SeBlock};
use cms_lstm::data::{build_dataset, Dataset, Geometry};
use cms_lstm::nn::{AdamW, ParamBuilder, ParamStore};
use cms_lstm::{checkpoint, export, gradcheck, metrics, ModelConfig, RunConfig};
use cms_tensor::{kernels, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const BUDGET_SECONDS: f64 = 45.0 * 60.0;
const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_SECONDS: f64 = 120.0;
const ATTENTION_ROW_TOLERANCE: f64 = 1e-9;
const FORCED_GATE_TOLERANCE: f64 = 1e-9;
const CONV_TOLERANCE: f64 = 1e-10;
const MATMUL_TOLERANCE: f64 = 1e-12;
const METRIC_TOLERANCE: f64 = 1e-9;
const LOSS_CURVE_TOLERANCE: f64 = 1e-9;
const LOSS_DROP: f64 = 0.5;
const LOSS_WINDOW: usize = 10;
const MIN_SEED_WINS: usize = 2;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    for (name, e) in store.iter_mut() {
        if name.starts_with(prefix) {
            e.value = Tensor::zeros(e.value.shape());
        }
    }
}

fn set(store: &mut ParamStore, name: &str, v: f64) {
    let e = store.by_name_mut(name).expect("parameter exists");
    e.value = Tensor::full(e.value.shape(), v);
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let report = gradcheck::run(&gradcheck::Options {
        tolerance: GRADCHECK_TOLERANCE,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let cells = report
        .results
        .iter()
        .filter(|r| r.name.starts_with("cell"))
        .count();
    ensure(cells == 4, || {
        format!("{cells} cell configurations checked, expected 4")
    })?;
    ensure(report.passed(), || {
        let bad: Vec<String> = report
            .failures()
            .map(|r| format!("{}={:e}", r.name, r.worst))
            .collect();
        format!("failures: {}", bad.join(", "))
    })?;
    ensure(secs < GRADCHECK_SECONDS, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} cases, worst relative error {:e} < {GRADCHECK_TOLERANCE:e}, {secs:.1}s",
        report.results.len(),
        report.worst()
    ))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for depth in 1..=4 {
        let mut b = ParamBuilder::new(depth as u64);
        let ce = CeBlock::register(&mut b, "ce", 3, 4, 5, 2.0, depth);
        let mut store = b.finish();
        zero_prefix(&mut store, "ce");
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let h = randn(&mut rng, &[2, 4, 6, 6]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = ce
            .forward(&p, tape.constant(x.clone()), tape.constant(h.clone()))
            .map_err(|e| e.to_string())?;
        ensure(*out.x.value() == x && *out.h.value() == h, || {
            format!("depth {depth}: output differs from input")
        })?;
    }
    Ok("bit-exact identity at depths 1..4".into())
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = ParamBuilder::new(3);
    let qkv = Qkv::register(&mut b, "a", 4);
    let mut store = b.finish();
    zero_prefix(&mut store, "a.v");
    let z = randn(&mut rng, &[4, 4, 3, 3]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (out, _) = bam(&p, &qkv, tape.constant(z.clone())).map_err(|e| e.to_string())?;
    ensure(*out.value() == z, || {
        "zero value projection changed z".into()
    })?;

    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut b = ParamBuilder::new(100 + case);
        let qkv = Qkv::register(&mut b, "a", 4);
        let store = b.finish();
        let z = randn(&mut rng, &[4, 4, 2, 3]).scale(2.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, att) = bam(&p, &qkv, tape.constant(z)).map_err(|e| e.to_string())?;
        for row in att.value().data().chunks(6) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= ATTENTION_ROW_TOLERANCE, || {
        format!("row sum error {worst:e}")
    })?;
    Ok(format!(
        "identity bit-exact; worst row-sum error {worst:e} over 100 patch groups"
    ))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut b = ParamBuilder::new(4);
    let se = SeBlock::register(&mut b, "se", 2, 3, &[1, 2], false);
    let store = b.finish();
    for state in 0..1000 {
        let h = randn(&mut rng, &[1, 2, 4, 4]);
        let c = randn(&mut rng, &[1, 2, 4, 4]).scale(2.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = se
            .forward(&p, tape.constant(h), tape.constant(c.clone()))
            .map_err(|e| e.to_string())?;
        let (cv, gv) = (out.c.value(), out.candidate.value());
        for ((&new, &old), &g) in cv.data().iter().zip(c.data()).zip(gv.data()) {
            ensure(new >= old.min(g) && new <= old.max(g), || {
                format!("state {state}: {new} outside [{old}, {g}]")
            })?;
        }
    }
    let mut worst: f64 = 0.0;
    for (bias, keep) in [(-40.0, true), (40.0, false)] {
        let mut store = store.clone();
        zero_prefix(&mut store, "se.a_i.kernel");
        zero_prefix(&mut store, "se.h_i.kernel");
        set(&mut store, "se.a_i.bias", bias);
        let h = randn(&mut rng, &[2, 2, 4, 4]);
        let c = randn(&mut rng, &[2, 2, 4, 4]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = se
            .forward(&p, tape.constant(h), tape.constant(c.clone()))
            .map_err(|e| e.to_string())?;
        let target = if keep {
            c
        } else {
            (*out.candidate.value()).clone()
        };
        worst = worst.max(out.c.value().max_abs_diff(&target));
    }
    ensure(worst <= FORCED_GATE_TOLERANCE, || {
        format!("forced gate error {worst:e}")
    })?;
    Ok(format!("1000 states convex; forced-gate error {worst:e}"))
}

fn conv_ref(store: &ParamStore, name: &str, x: &Tensor, bias: bool) -> Tensor {
    let k = &store.by_name(&format!("{name}.kernel")).unwrap().value;
    let b = bias.then(|| &store.by_name(&format!("{name}.bias")).unwrap().value);
    kernels::conv2d(x, k, b).unwrap()
}

fn layer_norm_ref(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let s = x.shape();
    let (plane, n) = (s[2] * s[3], s[1] * s[2] * s[3]);
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
        let mean = if src.iter().all(|&v| v == src[0]) {
            src[0]
        } else {
            src.iter().sum::<f64>() / n as f64
        };
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for i in 0..n {
            dst[i] = (src[i] - mean) * rstd * gain.data()[i / plane] + bias.data()[i / plane];
        }
    }
    out
}

fn convlstm_ref(
    store: &ParamStore,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    ln: bool,
) -> (Tensor, Tensor) {
    let pre = |gate: &str| {
        let s = conv_ref(store, &format!("cell.gates.x_{gate}"), x, true)
            .add(&conv_ref(store, &format!("cell.gates.h_{gate}"), h, false))
            .unwrap();
        if ln {
            let gain = &store
                .by_name(&format!("cell.gates.ln_{gate}.gain"))
                .unwrap()
                .value;
            let bias = &store
                .by_name(&format!("cell.gates.ln_{gate}.bias"))
                .unwrap()
                .value;
            layer_norm_ref(&s, gain, bias)
        } else {
            s
        }
    };
    let g = pre("g").map(f64::tanh);
    let i = pre("i").map(kernels::sigmoid);
    let f = pre("f").map(kernels::sigmoid);
    let o = pre("o").map(kernels::sigmoid);
    let c2 = f
        .hadamard(c)
        .unwrap()
        .add(&i.hadamard(&g).unwrap())
        .unwrap();
    let h2 = o.hadamard(&c2.map(f64::tanh)).unwrap();
    (h2, c2)
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ln in [true, false] {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 3,
            kernel: 3,
            frame_height: 5,
            frame_width: 5,
            enable_ce: false,
            enable_se: false,
            layer_norm: ln,
            ..ModelConfig::default()
        };
        let mut b = ParamBuilder::new(5);
        let cell = CmsCell::register(&mut b, "cell", 2, &cfg);
        let mut store = b.finish();
        for (name, e) in store.iter_mut() {
            if name.contains(".ln_") {
                e.value = randn(&mut rng, e.value.shape());
            }
        }
        let x = randn(&mut rng, &[2, 2, 5, 5]);
        let h = randn(&mut rng, &[2, 3, 5, 5]);
        let c = randn(&mut rng, &[2, 3, 5, 5]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let state = CellState {
            h: tape.constant(h.clone()),
            c: tape.constant(c.clone()),
        };
        let out = cell
            .step(&p, tape.constant(x.clone()), state)
            .map_err(|e| e.to_string())?;
        let (h_ref, c_ref) = convlstm_ref(&store, &x, &h, &c, ln);
        ensure(
            *out.state.h.value() == h_ref && *out.state.c.value() == c_ref,
            || format!("layer_norm={ln}: ablated cell differs from reference ConvLSTM"),
        )?;
    }
    Ok("bit-exact with and without layer norm".into())
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (bn, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[bn, cout, h, wd]);
    for bi in 0..bn {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, c, sy as usize, sx as usize])
                                    * w.at(&[o, c, dy, dx]);
                            }
                        }
                    }
                    let i = out.offset(&[bi, o, y, xx]);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let r = 5.0;
    let g: Vec<f64> = (0..11)
        .map(|i| (-((i as f64 - r).powi(2)) / 4.5).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let win = |dy: usize, dx: usize| g[dy] * g[dx] / (gs * gs);
    let mut total = 0.0;
    let mut n = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let at = |p: &[f64], dy: usize, dx: usize| p[(y0 + dy) * w + x0 + dx];
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    ma += win(dy, dx) * at(a, dy, dx);
                    mb += win(dy, dx) * at(b, dy, dx);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let (da, db) = (at(a, dy, dx) - ma, at(b, dy, dx) - mb);
                    va += win(dy, dx) * da * da;
                    vb += win(dy, dx) * db * db;
                    cov += win(dy, dx) * da * db;
                }
            }
            let (c1, c2) = (1e-4, 9e-4);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1.0;
        }
    }
    total / n
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut conv_worst: f64 = 0.0;
    for _ in 0..100 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (bn, cin, cout) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let x = randn(&mut rng, &[bn, cin, h, w]);
        let kern = randn(&mut rng, &[cout, cin, k, k]);
        let bias = randn(&mut rng, &[cout]);
        let got = kernels::conv2d(&x, &kern, Some(&bias)).map_err(|e| e.to_string())?;
        conv_worst = conv_worst.max(got.max_abs_diff(&conv_oracle(&x, &kern, &bias)));
    }
    ensure(conv_worst <= CONV_TOLERANCE, || {
        format!("conv2d error {conv_worst:e}")
    })?;

    let mut mm_worst: f64 = 0.0;
    for _ in 0..100 {
        let (bn, m, k, n) = (
            rng.gen_range(1..3),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let (ta, tb) = (rng.gen::<bool>(), rng.gen::<bool>());
        let a = randn(&mut rng, &if ta { [bn, k, m] } else { [bn, m, k] });
        let b = randn(&mut rng, &if tb { [bn, n, k] } else { [bn, k, n] });
        let got = kernels::matmul_t(&a, &b, ta, tb).map_err(|e| e.to_string())?;
        for bi in 0..bn {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        let av = if ta {
                            a.at(&[bi, p, i])
                        } else {
                            a.at(&[bi, i, p])
                        };
                        let bv = if tb {
                            b.at(&[bi, j, p])
                        } else {
                            b.at(&[bi, p, j])
                        };
                        acc += av * bv;
                    }
                    mm_worst = mm_worst.max((got.at(&[bi, i, j]) - acc).abs());
                }
            }
        }
    }
    ensure(mm_worst <= MATMUL_TOLERANCE, || {
        format!("matmul error {mm_worst:e}")
    })?;

    let mut metric_worst: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(11..20), rng.gen_range(11..20));
        let a = Tensor::from_fn(&[1, h, w], |_| rng.gen::<f64>());
        let b = Tensor::from_fn(&[1, h, w], |_| rng.gen::<f64>());
        let (mut se, mut ae, mut sq) = (0.0, 0.0, 0.0);
        for i in 0..h * w {
            let d = a.data()[i] - b.data()[i];
            se += (255.0 * d) * (255.0 * d);
            ae += (255.0 * d).abs();
            sq += d * d;
        }
        let psnr = 10.0 * (1.0 / (sq / (h * w) as f64)).log10();
        let pairs = [
            (metrics::mse(&a, &b).unwrap(), se),
            (metrics::mae(&a, &b).unwrap(), ae),
            (metrics::psnr(&a, &b, 1.0).unwrap(), psnr),
            (
                metrics::ssim(&a, &b).unwrap(),
                ssim_oracle(a.data(), b.data(), h, w),
            ),
        ];
        for (got, want) in pairs {
            metric_worst = metric_worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    ensure(metric_worst <= METRIC_TOLERANCE, || {
        format!("metric error {metric_worst:e}")
    })?;

    let x = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 101) as f64 / 100.0);
    let self_ssim = metrics::ssim(&x, &x).unwrap();
    ensure(self_ssim == 1.0, || format!("SSIM(x, x) = {self_ssim:?}"))?;
    let p = metrics::psnr_from_mse(0.01, 1.0);
    ensure(p == 20.0, || format!("PSNR(mse = 0.01) = {p:?}"))?;
    Ok(format!(
        "conv {conv_worst:e}, matmul {mm_worst:e}, metrics {metric_worst:e}; SSIM(x,x)=1, PSNR(0.01)=20"
    ))
}

fn criterion_9() -> Check {
    let geometry = Geometry {
        frame_size: 16,
        shapes: 2,
        frames: 6,
    };
    let (train, _) = build_dataset(9, 5, 1, &geometry).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("d.stsq");
    train.save(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = Dataset::load(&path).map_err(|e| e.to_string())?;
    ensure(back == train && back.encode() == bytes, || {
        "STSQ round trip differs".into()
    })?;

    let cfg = ModelConfig {
        layers: 1,
        hidden: 2,
        kernel: 3,
        frame_height: 8,
        frame_width: 8,
        se_scales: vec![1, 2],
        ..ModelConfig::default()
    };
    let (_, mut store) = CmsModel::build(&cfg, 9).map_err(|e| e.to_string())?;
    for (i, (_, e)) in store.iter_mut().enumerate() {
        e.m = e.value.scale(0.1 * (i + 1) as f64);
        e.v = e.value.map(|v| v * v);
    }
    let mut opt = AdamW::new(1e-3, 1e-4);
    opt.step = 17;
    let ck = dir.path().join("c.cmsl");
    checkpoint::save(&store, &opt, &ck).map_err(|e| e.to_string())?;
    let ck_bytes = std::fs::read(&ck).map_err(|e| e.to_string())?;
    let (s2, o2) = checkpoint::load(&ck).map_err(|e| e.to_string())?;
    ensure(
        s2 == store && o2 == opt && checkpoint::encode(&s2, &o2) == ck_bytes,
        || "CMSL round trip differs".into(),
    )?;

    let frame = Tensor::from_fn(&[1, 4, 5], |i| i as f64 / 19.0 * 1.2 - 0.1);
    let pgm = dir.path().join("f.pgm");
    export::write_frame(&pgm, &frame).map_err(|e| e.to_string())?;
    let raw = std::fs::read(&pgm).map_err(|e| e.to_string())?;
    let (w, h, px) = export::parse_pgm(&raw).map_err(|e| e.to_string())?;
    ensure(
        raw.starts_with(b"P5\n5 4\n255\n") && (w, h) == (5, 4),
        || "PGM header".into(),
    )?;
    for (p, v) in px.iter().zip(frame.data()) {
        let want = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ensure(*p == want, || {
            format!("pixel {v} quantised to {p}, expected {want}")
        })?;
    }
    Ok("STSQ and CMSL bit-exact; PGM bytes equal round(255·clamp(v, 0, 1))".into())
}

/// Shared state for the training criteria.
struct DeskScale {
    protocol: Protocol,
    train: Dataset,
    test: Dataset,
    /// Measured seconds per training sample.
    sample_seconds: Vec<(Variant, f64)>,
    force: bool,
    sweep: Option<Vec<RunResult>>,
}

const SWEEP_VARIANTS: [Variant; 3] = [Variant::Cms, Variant::CeOnly, Variant::Plain];

impl DeskScale {
    fn new() -> std::result::Result<Self, String> {
        let protocol = Protocol::desk_scale();
        let (train, test) = protocol.datasets().map_err(|e| e.to_string())?;
        let mut sample_seconds = Vec::new();
        for v in SWEEP_VARIANTS {
            sample_seconds.push((
                v,
                protocol.time_sample(v, &train).map_err(|e| e.to_string())?,
            ));
        }
        Ok(Self {
            protocol,
            train,
            test,
            sample_seconds,
            force: std::env::var("CMS_ACCEPTANCE_FULL").is_ok_and(|v| v == "1"),
            sweep: None,
        })
    }

    fn seconds(&self, v: Variant) -> f64 {
        self.sample_seconds.iter().find(|(x, _)| *x == v).unwrap().1
    }

    fn sweep_projection(&self) -> f64 {
        let runs = self.protocol.seeds.len();
        SWEEP_VARIANTS
            .iter()
            .map(|&v| self.protocol.projected_seconds(self.seconds(v), runs))
            .sum()
    }

    fn gate(&self, projected: f64) -> std::result::Result<(), String> {
        if self.force || projected <= BUDGET_SECONDS {
            return Ok(());
        }
        let per: Vec<String> = self
            .sample_seconds
            .iter()
            .map(|(v, s)| format!("{} {s:.2}s", v.name()))
            .collect();
        Err(format!(
            "not run: projected {:.1} h exceeds the {:.0} min budget (measured per-sample cost: {}); \
             set CMS_ACCEPTANCE_FULL=1 to run it",
            projected / 3600.0,
            BUDGET_SECONDS / 60.0,
            per.join(", ")
        ))
    }

    fn reference(&self) -> Option<&RunResult> {
        let seed = self.protocol.seeds[0];
        self.sweep
            .as_ref()?
            .iter()
            .find(|r| r.variant == Variant::Cms && r.seed == seed)
    }
}

fn criterion_7(ds: &mut DeskScale) -> Check {
    let projected = ds.sweep_projection();
    ds.gate(projected)?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for &v in &SWEEP_VARIANTS {
        for &seed in &ds.protocol.seeds {
            runs.push(
                run_variant(&ds.protocol, v, seed, &ds.train, &ds.test)
                    .map_err(|e| e.to_string())?,
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ds.sweep = Some(runs);
    let runs = ds.sweep.as_ref().unwrap();
    let reference = ds.reference().unwrap();
    let (first, last) = reference.loss_drop(LOSS_WINDOW);
    let mse = |v: Variant, seed: u64| {
        runs.iter()
            .find(|r| r.variant == v && r.seed == seed)
            .unwrap()
            .test_mse
    };
    let wins = |v: Variant| {
        ds.protocol
            .seeds
            .iter()
            .filter(|&&s| mse(v, s) < mse(Variant::Plain, s))
            .count()
    };
    let (cms_wins, ce_wins) = (wins(Variant::Cms), wins(Variant::CeOnly));
    let detail = format!(
        "loss {first:.4} -> {last:.4}; CMS beats ConvLSTM on {cms_wins}/3 seeds, CE-only on {ce_wins}/3; sweep {:.1} min",
        secs / 60.0
    );
    ensure(last <= LOSS_DROP * first, || {
        format!("(a) loss did not halve: {detail}")
    })?;
    ensure(cms_wins >= MIN_SEED_WINS, || format!("(b) {detail}"))?;
    ensure(ce_wins >= MIN_SEED_WINS, || format!("(c) {detail}"))?;
    ensure(secs < BUDGET_SECONDS, || format!("runtime: {detail}"))?;
    Ok(detail)
}

fn criterion_8(ds: &mut DeskScale) -> Check {
    let cost = ds.protocol.projected_seconds(ds.seconds(Variant::Cms), 1);
    let needed = if ds.reference().is_some() { 1.0 } else { 2.0 };
    ds.gate(needed * cost)?;
    let seed = ds.protocol.seeds[0];
    let run = || {
        run_variant(&ds.protocol, Variant::Cms, seed, &ds.train, &ds.test)
            .map_err(|e| e.to_string())
    };
    let second = run()?;
    let first_owned;
    let first = match ds.reference() {
        Some(r) => r,
        None => {
            first_owned = run()?;
            &first_owned
        }
    };
    let worst = first
        .losses
        .iter()
        .zip(&second.losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(
        first.losses.len() == second.losses.len() && worst <= LOSS_CURVE_TOLERANCE,
        || format!("loss curves differ by {worst:e}"),
    )?;
    ensure(first.checkpoint == second.checkpoint, || {
        "final checkpoints differ".into()
    })?;
    Ok(format!(
        "loss curves differ by {worst:e}; checkpoints bit-identical"
    ))
}

fn criterion_10(ds: &mut DeskScale) -> Check {
    if ds.reference().is_none() {
        ds.gate(ds.protocol.projected_seconds(ds.seconds(Variant::Cms), 1))?;
        let seed = ds.protocol.seeds[0];
        let run = run_variant(&ds.protocol, Variant::Cms, seed, &ds.train, &ds.test)
            .map_err(|e| e.to_string())?;
        ds.sweep.get_or_insert_with(Vec::new).push(run);
    }
    let r = ds.reference().unwrap();
    let t_in = ds.protocol.base.t_in;
    let trained = ce_variances(&r.outcome.model, &r.outcome.store, &ds.test, t_in)?;
    let mut zero = r.outcome.store.clone();
    for (name, e) in zero.iter_mut() {
        if name.contains(".ce.") {
            e.value = Tensor::zeros(e.value.shape());
        }
    }
    let baseline = ce_variances(&r.outcome.model, &zero, &ds.test, t_in)?;
    let floor = baseline.iter().cloned().fold(0.0, f64::max);
    let least = trained.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(least > floor, || {
        format!("smallest trained map variance {least:e} vs zero-init {floor:e}")
    })?;
    Ok(format!(
        "smallest trained map variance {least:e} > zero-init {floor:e}"
    ))
}

/// Exports the maps of test sequence 0 and returns the per-image variance of
/// the CE maps, checking that the exported images exist.
fn ce_variances(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    t_in: usize,
) -> std::result::Result<Vec<f64>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out =
        export::export_maps(model, store, data, 0, t_in, dir.path()).map_err(|e| e.to_string())?;
    let ce_images = out
        .written
        .iter()
        .filter(|p| p.to_string_lossy().contains("_ce_"))
        .count();
    ensure(ce_images == 2 * (data.frames - t_in), || {
        format!("{ce_images} CE images exported")
    })?;
    export::ce_map_variances(model, store, data, 0, t_in).map_err(|e| e.to_string())
}

/// Same pipeline as criteria 7a, 8 and 10 at a size that runs in about a
/// minute. Reported for information only.
fn supplementary() -> Check {
    let mut protocol = Protocol::desk_scale();
    protocol.geometry = Geometry {
        frame_size: 16,
        shapes: 2,
        frames: 10,
    };
    protocol.n_train = 64;
    protocol.n_test = 4;
    protocol.base = RunConfig {
        model: ModelConfig {
            hidden: 8,
            frame_height: 16,
            frame_width: 16,
            ..protocol.base.model.clone()
        },
        t_in: 5,
        t_out: 5,
        batch: 2,
        iters: 100,
        ..protocol.base.clone()
    };
    let (train, test) = protocol.datasets().map_err(|e| e.to_string())?;
    let run = || run_variant(&protocol, Variant::Cms, 1, &train, &test).map_err(|e| e.to_string());
    let (a, b) = (run()?, run()?);
    let (first, last) = a.loss_drop(LOSS_WINDOW);
    let same = a.losses == b.losses && a.checkpoint == b.checkpoint;
    let trained = export::ce_map_variances(&a.outcome.model, &a.outcome.store, &test, 0, 5)
        .map_err(|e| e.to_string())?;
    let least = trained.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "16x16, 8 hidden, 5->5, 100 iterations at batch 2: loss {first:.4} -> {last:.4} ({:.0}% drop), \
         repeat run identical: {same}, smallest CE map variance {least:e}",
        100.0 * (1.0 - last / first)
    ))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let names = [
        "gradient integrity",
        "CE identity",
        "BAM residual identity",
        "SE convexity",
        "ablation degeneracy",
        "oracle equivalence",
        "desk-scale ablation",
        "determinism",
        "format round trips",
        "diagnostics sanity",
    ];
    let mut desk: Option<std::result::Result<DeskScale, String>> = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        let result = guarded(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            9 => criterion_9(),
            _ => {
                let ds = desk
                    .get_or_insert_with(DeskScale::new)
                    .as_mut()
                    .map_err(|e| e.clone())?;
                match n {
                    7 => criterion_7(ds),
                    8 => criterion_8(ds),
                    _ => criterion_10(ds),
                }
            }
        });
        match result {
            Ok(detail) => println!("criterion {n:>2} [PRIMARY] {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} [PRIMARY] {name}: FAIL ({detail})");
            }
        }
    }
    match guarded(supplementary) {
        Ok(d) | Err(d) => println!("supplementary, not a criterion: {d}"),
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        names.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
