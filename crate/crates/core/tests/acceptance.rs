//! The ten acceptance criteria. Each test prints one PASS/FAIL line on stderr.
//!
//! Criteria 5 to 9 share one runner on the default toy experiment, so the
//! full file takes the better part of an hour in release mode.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semquant::codec::{decode_packet, encode_packet, frame, transmit_noisy, Coder, FrameReader, PacketMeta, FIXED_HEADER_LEN};
use semquant::harness::{prepare, run_experiment, ExperimentConfig, Runner, RunStatus, ABLATION_SCHEMES, SWEEP_RATIOS};
use semquant::objectives::{jsd, kld};
use semquant::vq::quantize;
use semquant::{Codebook, IndexMap, Scheme, Tape, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id}: {name}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared toy experiment

struct Shared {
    runner: Runner<f32>,
    segmenter_digest: String,
    extractor_digest: String,
    prepare_time: Duration,
    cell_time: BTreeMap<(Scheme, usize, u64), Duration>,
}

impl Shared {
    fn run(&mut self, scheme: Scheme, r: usize, seed: u64) -> RunStatus {
        let t = Instant::now();
        let outcome = self.runner.run(scheme, r, seed).expect("frozen networks stay intact").outcome.clone();
        self.cell_time.entry((scheme, r, seed)).or_insert_with(|| t.elapsed());
        outcome
    }

    fn seeds(&self) -> Vec<u64> {
        self.runner.config().seeds.clone()
    }

    /// `(mean mIoU, std, mean payload, diverged or failed seeds)`.
    fn mean_miou(&mut self, scheme: Scheme, r: usize) -> (f64, f64, f64, usize) {
        let seeds = self.seeds();
        for &s in &seeds {
            self.run(scheme, r, s);
        }
        let cells: Vec<_> = seeds.iter().map(|&s| (scheme, r, s)).collect();
        let report = self.runner.report(&cells, None);
        let row = report.row(scheme, r).expect("row for trained cell");
        (row.miou, row.miou_std, row.payload_bytes, row.divergences + row.failures)
    }
}

fn shared() -> &'static Mutex<Shared> {
    static SHARED: OnceLock<Mutex<Shared>> = OnceLock::new();
    SHARED.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let t = Instant::now();
        let ctx = prepare::<f32>(&cfg).expect("teacher trains on the default toy set");
        let prepare_time = t.elapsed();
        let segmenter_digest = ctx.segmenter.net().digest();
        let extractor_digest = ctx.extractor.digest();
        Mutex::new(Shared {
            runner: Runner::new(cfg, ctx),
            segmenter_digest,
            extractor_digest,
            prepare_time,
            cell_time: BTreeMap::new(),
        })
    })
}

fn lock_shared() -> MutexGuard<'static, Shared> {
    shared().lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// 1

fn brute_force(z: &[f64], cb: &Tensor<f64>, k: usize, d: usize) -> u32 {
    // ‖z‖² − 2z·c + ‖c‖², lowest index among equals.
    let zz: f64 = z.iter().map(|v| v * v).sum();
    (0..k)
        .map(|l| {
            let c = &cb.data()[l * d..(l + 1) * d];
            let dot: f64 = z.iter().zip(c).map(|(a, b)| a * b).sum();
            let cc: f64 = c.iter().map(|v| v * v).sum();
            (zz - 2.0 * dot + cc, l)
        })
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
        .1 as u32
}

#[test]
fn c01_quantizer_matches_brute_force() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC01);
    let ks = [2usize, 4, 64, 256];
    let mut mismatches = 0;
    for case in 0..1000 {
        let k = ks[case % ks.len()];
        let d = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let lattice = case % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| if lattice { rng.gen_range(-1i32..=1) as f64 } else { rng.gen_range(-2.0..2.0) };
        let mut cb = Tensor::from_fn(vec![k, d], |_| draw(&mut rng));
        if case % 5 == 0 {
            // duplicated codewords force exact ties
            let src = rng.gen_range(0..k);
            let dst = rng.gen_range(0..k);
            let row: Vec<f64> = cb.data()[src * d..(src + 1) * d].to_vec();
            cb.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
        }
        let z = Tensor::from_fn(vec![h, w, d], |_| draw(&mut rng));
        let idx = quantize(&z, &Codebook::from_tensor(cb.clone()).unwrap()).unwrap();
        let oracle: Vec<u32> = z.data().chunks(d).map(|p| brute_force(p, &cb, k, d)).collect();
        if idx.indices != oracle {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = mismatches == 0 && secs < 5.0;
    verdict(1, "quantizer oracle equivalence", ok, &format!("{mismatches} mismatches in 1000 cases, {secs:.2} s"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 2

#[test]
fn c02_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let prim = common::primitive_suite();
    let comp = common::composite_suite();
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<_> = prim.iter().chain(&comp).filter(|c| !c.passed()).collect();
    let worst_p = prim.iter().map(|c| c.worst).fold(0.0, f64::max);
    let worst_c = comp.iter().map(|c| c.worst).fold(0.0, f64::max);
    let ok = failed.is_empty() && comp.len() >= 5 && secs < 60.0;
    verdict(
        2,
        "gradient suite",
        ok,
        &format!("{} primitives worst {worst_p:.2e}, {} composites worst {worst_c:.2e}, {secs:.1} s", prim.len(), comp.len()),
    );
    assert!(ok, "{failed:#?}");
}

// ---------------------------------------------------------------------------
// 3

fn divergence(f: fn(&mut Tape<f64>, semquant::Var, semquant::Var) -> semquant::Result<semquant::Var>, p: &[f64], q: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 1, p.len()], p.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 1, q.len()], q.to_vec()).unwrap());
    let out = f(&mut tape, a, b).unwrap();
    tape.value(out).item()
}

fn simplex(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn c03_divergence_properties() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC03);
    let bound = std::f64::consts::LN_2 + 1e-9;
    let (mut asym, mut self_gap, mut over, mut neg_kld) = (0.0f64, 0.0f64, 0usize, 0.0f64);
    for _ in 0..10_000 {
        let m = rng.gen_range(2..=6);
        let (p, q) = (simplex(m, &mut rng), simplex(m, &mut rng));
        let pq = divergence(jsd, &p, &q);
        asym = asym.max((pq - divergence(jsd, &q, &p)).abs());
        self_gap = self_gap.max(divergence(jsd, &p, &p).abs());
        over += usize::from(pq > bound);
        neg_kld = neg_kld.min(divergence(kld, &p, &q));
    }
    let hand_jsd = divergence(jsd, &[0.5, 0.5], &[1.0, 0.0]);
    let hand_kld = divergence(kld, &[0.5, 0.5], &[0.9, 0.1]);
    let secs = t.elapsed().as_secs_f64();
    let ok = asym < 1e-12
        && self_gap <= 1e-7
        && over == 0
        && neg_kld >= -1e-7
        && (hand_jsd - 0.215762).abs() < 1e-6
        && (hand_kld - 0.510826).abs() < 1e-6
        && secs < 5.0;
    verdict(
        3,
        "divergence properties",
        ok,
        &format!(
            "asymmetry {asym:.1e}, self {self_gap:.1e}, {over} above ln2, min kld {neg_kld:.1e}, jsd {hand_jsd:.6}, kld {hand_kld:.6}, {secs:.2} s"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4

fn random_map(rng: &mut ChaCha8Rng) -> (IndexMap, PacketMeta) {
    let k = 1usize << rng.gen_range(1..=14);
    let (h, w) = (rng.gen_range(0..=12), rng.gen_range(0..=12));
    let r = [1usize, 2, 4, 8][rng.gen_range(0..4)];
    // skewed, uniform or nearly constant histograms
    let spread = match rng.gen_range(0..3) {
        0 => k,
        1 => k.min(4),
        _ => k.min(rng.gen_range(1..=64)),
    };
    let idx = (0..h * w).map(|_| rng.gen_range(0..spread) as u32).collect();
    (IndexMap::new(h, w, k, idx).unwrap(), PacketMeta::new(h * r, w * r, r, k).unwrap())
}

#[test]
fn c04_codec_bit_exactness() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC04);
    let mut problems = Vec::new();

    for case in 0..10_000 {
        let (idx, meta) = random_map(&mut rng);
        for coder in [Coder::Fixed, Coder::Huffman] {
            let bytes = encode_packet(&idx, meta, coder).unwrap().to_bytes();
            match decode_packet(&bytes) {
                Ok((back, m)) if back == idx && m == meta => {}
                other => problems.push(format!("case {case} {coder:?}: {other:?}")),
            }
            if encode_packet(&idx, meta, coder).unwrap().to_bytes() != bytes {
                problems.push(format!("case {case} {coder:?}: repeat encode differs"));
            }
            if case % 50 == 0 {
                for cut in 0..bytes.len() {
                    if decode_packet(&bytes[..cut]).is_ok() {
                        problems.push(format!("case {case} {coder:?}: truncation to {cut} accepted"));
                    }
                }
                let framed = frame(&bytes);
                for pos in 0..framed.len() {
                    let mut bad = framed.clone();
                    bad[pos] ^= 1 << (pos % 8);
                    let mut reader = FrameReader::new(&bad);
                    if reader.next_frame().is_ok() {
                        problems.push(format!("case {case} {coder:?}: flipped bit at byte {pos} undetected"));
                    }
                }
            }
        }
    }

    // Same histogram in a different spatial order gives the same code table.
    let base = IndexMap::new(4, 8, 16, (0..32).map(|i| [0, 0, 0, 0, 1, 1, 2, 3][i % 8]).collect()).unwrap();
    let mut shuffled = base.indices.clone();
    shuffled.reverse();
    shuffled.rotate_left(5);
    let perm = IndexMap::new(4, 8, 16, shuffled).unwrap();
    let meta = PacketMeta::new(16, 32, 4, 16).unwrap();
    let (a, b) = (encode_packet(&base, meta, Coder::Huffman).unwrap(), encode_packet(&perm, meta, Coder::Huffman).unwrap());
    if a.code_lengths != b.code_lengths || a.to_bytes()[..a.header_len()] != b.to_bytes()[..b.header_len()] {
        problems.push("permuted map produced a different code table".into());
    }

    let big = IndexMap::new(64, 128, 512, (0..64 * 128).map(|i| (i % 512) as u32).collect()).unwrap();
    let fixed = encode_packet(&big, PacketMeta::new(256, 512, 4, 512).unwrap(), Coder::Fixed).unwrap();
    if fixed.body.len() != 9216 || fixed.to_bytes().len() != 9216 + FIXED_HEADER_LEN {
        problems.push(format!("64x128 K=512 body is {} bytes", fixed.body.len()));
    }

    let hand = IndexMap::new(2, 4, 4, vec![0, 0, 0, 0, 0, 1, 2, 3]).unwrap();
    let p = encode_packet(&hand, PacketMeta::new(2, 4, 1, 4).unwrap(), Coder::Huffman).unwrap();
    let lengths = p.code_lengths.clone().unwrap();
    let bits: u32 = hand.indices.iter().map(|&z| u32::from(lengths[z as usize])).sum();
    let mut sorted = lengths[..4].to_vec();
    sorted.sort_unstable();
    if bits != 13 || sorted != [1, 2, 3, 3] || p.body.len() != 2 {
        problems.push(format!("hand Huffman: lengths {lengths:?}, {bits} bits, {} body bytes", p.body.len()));
    }

    // A noisy channel either delivers the packet intact or reports an error.
    for s in 0..200 {
        let (idx, meta) = random_map(&mut rng);
        let bytes = encode_packet(&idx, meta, Coder::Huffman).unwrap().to_bytes();
        if let Ok(got) = transmit_noisy(&bytes, s, 0.002) {
            if got != bytes {
                problems.push(format!("channel seed {s}: corrupted frame accepted"));
            }
        }
    }

    let secs = t.elapsed().as_secs_f64();
    let ok = problems.is_empty() && secs < 30.0;
    verdict(4, "codec bit-exactness", ok, &format!("{} problems, {secs:.1} s", problems.len()));
    assert!(ok, "{:#?}", &problems[..problems.len().min(20)]);
}

// ---------------------------------------------------------------------------
// 5 to 9

#[test]
fn c05_frozen_task_invariance() {
    let _g = serial();
    let mut sh = lock_shared();
    let status = sh.run(Scheme::Gosvae, 4, 1);
    let ctx = sh.runner.context();
    let seg_now = ctx.segmenter.net().digest();
    let ext_now = ctx.extractor.digest();
    let ok = status == RunStatus::Ok
        && seg_now == sh.segmenter_digest
        && seg_now == ctx.segmenter.digest()
        && ctx.segmenter.verify().is_ok()
        && ext_now == sh.extractor_digest;
    verdict(5, "frozen-task invariance", ok, &format!("run {status:?}, segmenter {}, extractor {}", &seg_now[..12], &ext_now[..12]));
    assert!(ok);
}

#[test]
fn c06_end_to_end_ordering() {
    let _g = serial();
    let mut sh = lock_shared();
    let (vq, vq_std, vq_pay, vq_lost) = sh.mean_miou(Scheme::Vqvae, 4);
    let (gos, gos_std, gos_pay, gos_lost) = sh.mean_miou(Scheme::GosvaeStar, 4);
    let seeds = sh.seeds();
    let spent: Duration = sh.prepare_time
        + seeds
            .iter()
            .flat_map(|&s| [(Scheme::Vqvae, 4, s), (Scheme::GosvaeStar, 4, s)])
            .filter_map(|c| sh.cell_time.get(&c).copied())
            .sum::<Duration>();
    let pay_gap = (gos_pay - vq_pay).abs() / vq_pay;
    let ok = gos >= vq + 2.0 && pay_gap <= 0.05 && spent <= Duration::from_secs(20 * 60) && vq_lost + gos_lost == 0;
    verdict(
        6,
        "end-to-end ordering",
        ok,
        &format!(
            "GOSVAE_STAR {gos:.2}±{gos_std:.2} vs VQVAE {vq:.2}±{vq_std:.2} mIoU, payload {gos_pay:.1} vs {vq_pay:.1} B ({:.1}%), runtime {:.0} s, {} lost runs",
            pay_gap * 100.0,
            spent.as_secs_f64(),
            vq_lost + gos_lost
        ),
    );
    assert!(ok);
}

#[test]
fn c07_ablation_ordering() {
    let _g = serial();
    let mut sh = lock_shared();
    let cells: Vec<_> = ABLATION_SCHEMES.iter().map(|&s| (s, sh.mean_miou(s, 4))).collect();
    let means: Vec<(Scheme, f64)> = cells.iter().map(|(s, c)| (*s, c.0)).collect();
    let lost: usize = cells.iter().map(|(_, c)| c.3).sum();
    let get = |s: Scheme| means.iter().find(|m| m.0 == s).unwrap().1;
    let ce = get(Scheme::AblCe);
    let next_worst = means.iter().filter(|m| m.0 != Scheme::AblCe).map(|m| m.1).fold(f64::INFINITY, f64::min);
    let (jsd_lpips, kld_only) = (get(Scheme::Gosvae), get(Scheme::AblKld));
    let ok = ce + 2.0 <= next_worst && jsd_lpips >= kld_only + 2.0;
    let table: Vec<String> = cells.iter().map(|(s, c)| format!("{s} {:.2}±{:.2}", c.0, c.1)).collect();
    verdict(7, "ablation ordering", ok, &format!("{}; {lost} lost runs", table.join(", ")));
    assert!(ok, "ABL_CE {ce:.2} vs next worst {next_worst:.2}; JSD+LPIPS {jsd_lpips:.2} vs KLD {kld_only:.2}");
}

#[test]
fn c08_curve_correlation() {
    let _g = serial();
    let mut sh = lock_shared();
    let seeds = sh.seeds();
    for &s in &seeds {
        sh.run(Scheme::Gosvae, 4, s);
    }
    let corr = sh.runner.correlation(Scheme::Gosvae, 4, &seeds).expect("curves for every seed");
    let ok = corr.mean > 0.8;
    verdict(8, "curve correlation", ok, &format!("mean {:.3}, per seed {:?}", corr.mean, corr.per_seed));
    assert!(ok);
}

#[test]
fn c09_rate_sweep() {
    let _g = serial();
    let mut sh = lock_shared();
    let seeds = sh.seeds();
    let mut fixed_body = Vec::new();
    let mut rows = Vec::new();
    let mut lost_runs = 0;
    for &r in &SWEEP_RATIOS {
        let (miou, std, _, lost) = sh.mean_miou(Scheme::GosvaeStar, r);
        lost_runs += lost;
        let fixed: Vec<f64> = seeds
            .iter()
            .map(|&s| sh.runner.run(Scheme::GosvaeStar, r, s).unwrap().eval.as_ref().map_or(f64::NAN, |e| e.fixed_payload_bytes as f64))
            .collect();
        fixed_body.push(fixed[0] - FIXED_HEADER_LEN as f64);
        rows.push((r, miou, std));
    }
    let exact = fixed_body.windows(2).all(|w| w[0] == 4.0 * w[1]);
    let inversions: Vec<_> = rows.windows(2).filter(|w| w[1].1 > w[0].1).collect();
    let within = inversions.iter().all(|w| w[1].1 - w[0].1 <= w[0].2 + w[1].2);
    let ok = exact && inversions.len() <= 1 && within;
    let table: Vec<String> = rows.iter().zip(&fixed_body).map(|((r, m, s), b)| format!("r{r} {m:.2}±{s:.2} ({b} B)")).collect();
    verdict(9, "rate sweep", ok, &format!("{}; {} inversions, {lost_runs} lost runs", table.join(", "), inversions.len()));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 10

const TINY: &str = "\
n_train = 24
n_val = 4
height = 32
width = 32
classes = 2
teacher_epochs = 8
schemes = VQVAE,GOSVAE_STAR
seeds = 1
epochs = 1
finetune_epochs = 1
k = 8
widths = 4,8
dagger_k = 16
dagger_widths = 4,8
precision = double
";

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_double_precision_determinism() {
    let _g = serial();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let trees: Vec<_> = dirs
        .iter()
        .map(|d| {
            let cfg = ExperimentConfig::parse_with(TINY, &[("out_dir", d.path().display().to_string())]).unwrap();
            run_experiment(&cfg).unwrap();
            let mut files = tree(d.path());
            // the echoed config names its own output directory
            let echo = files.get_mut(Path::new("config.txt")).expect("config echo");
            let text = String::from_utf8(echo.clone()).unwrap();
            *echo = text.lines().filter(|l| !l.starts_with("out_dir")).collect::<Vec<_>>().join("\n").into_bytes();
            files
        })
        .collect();
    let names: Vec<_> = trees[0].keys().map(|p| p.display().to_string()).collect();
    let differing: Vec<_> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let expected = ["report.json", "report.csv", "runs.csv", "checkpoints/GOSVAE_STAR_r4_s1.gosw", "curves/GOSVAE_STAR_r4_s1.csv"];
    let complete = expected.iter().all(|e| names.iter().any(|n| n == e));
    let ok = complete && differing.is_empty() && trees[0].len() == trees[1].len();
    verdict(10, "determinism", ok, &format!("{} files compared, {} differ", names.len(), differing.len()));
    assert!(ok, "files {names:?}, differing {differing:?}");
}
