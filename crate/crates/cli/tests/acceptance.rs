//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Criteria 9-11 train the desk-scale pipeline
//! on three seeds and take a while.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ccgen::pipeline::{Run, Stage};
use ccgen::{Preset, RunConfig};
use ccgen_core::crystal::{canonical_atom_order, find_local_environment, reparameterize_lattice, IMAGE_RANGE};
use ccgen_core::io::LabeledCrystal;
use ccgen_core::linalg::{norm, sub3, Vec3};
use ccgen_core::matcher::{structures_match, FingerprintMatcher, MatcherConfig};
use ccgen_core::metrics::{compute_metrics, CrystalFlags, STABILITY_THRESHOLD};
use ccgen_core::oracle::{StabilityOracle, ToyOracle, ToyOracleParams};
use ccgen_core::quantize::{quantize, squared_distance, Codebook};
use ccgen_core::schedule::{cfg_noise, NoiseSchedule};
use ccgen_core::synthetic::{build_template, make_synthetic_dataset, three_family_specs, TemplateKind};
use ccgen_core::validity::check_validity;
use ccgen_core::{Crystal, Mat3};
use ccgen_models::checkpoint::Checkpoint;
use ccgen_models::denoiser::{DenoiserShape, DiffusionTransformer};
use ccgen_models::diffusion::reverse_sample;
use ccgen_models::interpret::{train_symmetry_classifier, ClassifierConfig};
use ccgen_models::nn::{ParamStore, TransformerConfig};
use ccgen_models::vqvae::{kl_divergence, vae_stage_loss, vqvae_loss, BatchTargets, DecoderOutput, VqVae};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

const TINY: &str = include_str!("fixtures/tiny.toml");
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id:>2} [{name}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn random_matrix(rng: &mut impl Rng, scale: f64) -> Mat3<f64> {
    Mat3::from_rows([[0; 3]; 3].map(|r: [i32; 3]| r.map(|_| rng.random_range(-scale..scale))))
}

fn random_rotation(rng: &mut impl Rng) -> Mat3<f64> {
    // Normalised quaternion.
    let q: [f64; 4] = [0; 4].map(|_: i32| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Mat3::from_rows([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

fn frob(m: &Mat3<f64>) -> f64 {
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_rec, mut worst_orth, mut worst_det, mut min_eig) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    let mut left_handed = 0;
    let mut ok = true;
    for _ in 0..1000 {
        let mut m = random_matrix(&mut rng, 1.0);
        if m.det().abs() < 1e-3 {
            m = m + Mat3::identity();
        }
        if m.det() < 0.0 {
            // Swapping two rows gives the right-handed matrix the factorisation
            // applies to; the left-handed one is checked as a point inversion.
            left_handed += 1;
        }
        let r = match reparameterize_lattice(&m) {
            Ok(r) => r,
            Err(_) => {
                ok = false;
                continue;
            }
        };
        let sign = if r.inverted { -1.0 } else { 1.0 };
        ok &= r.inverted == (m.det() < 0.0);
        let rec = (r.rotation * r.symmetric).scale(sign) - m;
        worst_rec = worst_rec.max(frob(&rec) / frob(&m));
        worst_orth = worst_orth.max(frob(&(r.rotation.transpose() * r.rotation - Mat3::identity())));
        worst_det = worst_det.max((r.rotation.det() - 1.0).abs());
        let (eig, _) = ccgen_core::linalg::symmetric_eigen(&r.symmetric);
        min_eig = min_eig.min(eig.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let elapsed = t.elapsed();
    let pass = ok && worst_rec < 1e-6 && worst_orth < 1e-8 && worst_det < 1e-8 && min_eig > 0.0 && elapsed < Duration::from_secs(5);
    outcome(
        1,
        "lattice reparameterization",
        pass,
        format!(
            "max rel recon {worst_rec:.2e}, max |UᵀU−I| {worst_orth:.2e}, max |det U−1| {worst_det:.2e}, min eig {min_eig:.3e}, \
             {left_handed} left-handed inputs reconstructed as −U·L̃, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_crystal(rng: &mut impl Rng, max_atoms: usize) -> Crystal<f64> {
    let a = rng.random_range(3.0..6.0);
    let l = (Mat3::identity() + random_matrix(rng, 0.2)).scale(a);
    let n = rng.random_range(1..=max_atoms);
    let frac: Vec<Vec3<f64>> = (0..n).map(|_| [0; 3].map(|_: i32| rng.random::<f64>())).collect();
    let z = (0..n).map(|_| rng.random_range(1..=100u8)).collect();
    Crystal::from_fractional(l, &frac, z).unwrap()
}

/// Explicit 5×5×5 supercell scan.
fn brute_force_neighbors(c: &Crystal<f64>, i: usize, xi: f64, k: usize) -> Vec<(usize, [i32; 3], f64)> {
    let l = c.lattice();
    let center = c.cart_coords()[i];
    let mut order: Vec<usize> = (0..c.num_atoms()).collect();
    let x = c.cart_coords();
    let z = c.atomic_numbers();
    order.sort_by(|&a, &b| z[a].cmp(&z[b]).then(x[a][0].total_cmp(&x[b][0])).then(x[a][1].total_cmp(&x[b][1])).then(x[a][2].total_cmp(&x[b][2])));
    let mut rank = vec![0; order.len()];
    for (p, &a) in order.iter().enumerate() {
        rank[a] = p;
    }
    let r = IMAGE_RANGE;
    let mut sites = Vec::new();
    for (j, xj) in x.iter().enumerate() {
        for a in -r..=r {
            for b in -r..=r {
                for cc in -r..=r {
                    if j == i && [a, b, cc] == [0, 0, 0] {
                        continue;
                    }
                    let n = [a as f64, b as f64, cc as f64];
                    let shift: Vec3<f64> = [0, 1, 2].map(|d| n[0] * l[(0, d)] + n[1] * l[(1, d)] + n[2] * l[(2, d)]);
                    let pos = [xj[0] + shift[0], xj[1] + shift[1], xj[2] + shift[2]];
                    sites.push((j, [a, b, cc], norm(&sub3(&pos, &center))));
                }
            }
        }
    }
    let d_min = sites.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    sites.retain(|s| s.2 <= xi * d_min);
    sites.sort_by(|p, q| p.2.total_cmp(&q.2).then(rank[p.0].cmp(&rank[q.0])).then(p.1.cmp(&q.1)));
    sites.truncate(k);
    sites
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut agree, mut envs, mut errors) = (0, 0, 0);
    for _ in 0..100 {
        let c = random_crystal(&mut rng, 6);
        let _ = canonical_atom_order(&c);
        for i in 0..c.num_atoms() {
            envs += 1;
            let oracle = brute_force_neighbors(&c, i, 1.1, 12);
            match find_local_environment(&c, i, 1.1, 12) {
                Ok(env) => {
                    let got: Vec<_> = env.neighbors.iter().map(|s| (s.atom, s.image, s.distance)).collect();
                    agree += (got == oracle && env.valid_count == 1 + oracle.len()) as usize;
                }
                Err(_) => errors += 1,
            }
        }
    }
    let elapsed = t.elapsed();
    outcome(
        2,
        "neighbor rule",
        agree == envs && elapsed < Duration::from_secs(30),
        format!("{agree}/{envs} environments identical to the supercell scan ({errors} errors), {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let d = 8;
    let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let cb = Codebook::from_rows(&rows).unwrap();
    let mut agree = 0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut best = (0, f64::INFINITY);
        for (t, r) in rows.iter().enumerate() {
            let dist: f64 = r.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (t, dist);
            }
        }
        let q = quantize(&z, &cb).unwrap();
        agree += (q.code_index == best.0 && q.distance == squared_distance(&z, cb.code(best.0))) as usize;
    }
    outcome(3, "quantization", agree == 1000, format!("{agree}/1000 latents assigned as by the exhaustive scan"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let sched = NoiseSchedule::<f64>::cosine(100).unwrap();
    let x0 = 1.5;
    let samples = 100_000;
    let mut worst = 0.0f64;
    for s in [1, 10, 50, 100] {
        let mut rec = Vec::with_capacity(samples);
        let mut closed = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut x = x0;
            for step in 1..=s {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = sched.alpha(step).sqrt() * x + sched.beta(step).sqrt() * e;
            }
            rec.push(x);
            let e: f64 = StandardNormal.sample(&mut rng);
            closed.push(sched.forward_diffuse(&[x0], s, &[e]).unwrap()[0]);
        }
        let moments = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
        };
        let (mr, vr) = moments(&rec);
        let (mc, vc) = moments(&closed);
        let ab = sched.alpha_bar(s);
        worst = worst.max((mr - mc).abs()).max((vr - vc).abs()).max((mr - ab.sqrt() * x0).abs()).max((vr - (1.0 - ab)).abs());
    }
    let cond: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
    let uncond: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
    let cfg_exact = cfg_noise(&cond, &uncond, 0.0).unwrap() == cond;

    let mut ps = ParamStore::new(9);
    let shape = DenoiserShape { net: TransformerConfig { layers: 1, hidden: 16, heads: 2 }, channels: 5, max_rows: 4, cond_dim: Some(3) };
    let den = DiffusionTransformer::new(&mut ps, "den", shape).unwrap();
    let small = NoiseSchedule::<f64>::cosine(20).unwrap();
    let mask = Tensor::new(&[[1f32, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
    let cond_rows = Tensor::randn(0f32, 1.0, (2, 4, 3), &Device::Cpu).unwrap();
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = reverse_sample(&den, &[2, 4, 5], &mask, Some(&cond_rows), &small, 2.0, Some(5.0), &mut r).unwrap();
        x.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
    };
    let deterministic = draw(17) == draw(17) && draw(17) != draw(18);
    outcome(
        4,
        "diffusion identities",
        worst < 1e-2 && cfg_exact && deterministic,
        format!("max moment gap {worst:.4} (10^5 samples), cfg at ω=0 exact: {cfg_exact}, sampler bit-deterministic: {deterministic}"),
    )
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn criterion_5() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (b, n, d) = (rng.random_range(1..4usize), rng.random_range(1..5usize), 4usize);
        let counts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=n)).collect();
        let mask: Vec<f64> = counts.iter().flat_map(|&c| (0..n).map(move |r| if r < c { 1.0 } else { 0.0 })).collect();
        let randn = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let logits = randn(&mut rng, b * n * 100);
        let coords = randn(&mut rng, b * n * 3);
        let lattice = randn(&mut rng, b * 6);
        let t_coords = randn(&mut rng, b * n * 3);
        let t_lattice = randn(&mut rng, b * 6);
        let species: Vec<u32> = (0..b * n).map(|_| rng.random_range(0..100)).collect();
        let rows = counts.iter().sum::<usize>();
        let mu = randn(&mut rng, rows * d);
        let log_sigma: Vec<f64> = randn(&mut rng, rows * d).iter().map(|v| 0.3 * v).collect();
        let z = randn(&mut rng, rows * d);
        let e = randn(&mut rng, rows * d);
        let weight = rng.random_range(0.001..1.0);

        let t = |v: &[f64], shape: &[usize]| Tensor::from_slice(v, shape, &dev).unwrap();
        let out = DecoderOutput { logits: t(&logits, &[b, n, 100]), coords: t(&coords, &[b, n, 3]), lattice: t(&lattice, &[b, 6]) };
        let tgt = BatchTargets {
            species: Tensor::from_slice(&species, (b, n), &dev).unwrap(),
            coords: t(&t_coords, &[b, n, 3]),
            lattice: t(&t_lattice, &[b, 6]),
            mask: t(&mask, &[b, n]),
        };
        let scalar = |x: &Tensor| x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        let vae = vae_stage_loss(&out, &tgt, &t(&mu, &[rows, d]), &t(&log_sigma, &[rows, d]), weight).unwrap();
        let vq = vqvae_loss(&out, &tgt, &t(&z, &[rows, d]), &t(&e, &[rows, d]), weight).unwrap();

        let atoms: f64 = mask.iter().sum();
        let (mut l_a, mut l_x) = (0.0, 0.0);
        for p in 0..b * n {
            if mask[p] == 1.0 {
                l_a -= log_softmax(&logits[p * 100..(p + 1) * 100])[species[p] as usize];
                l_x += (0..3).map(|k| (coords[p * 3 + k] - t_coords[p * 3 + k]).powi(2)).sum::<f64>();
            }
        }
        let (l_a, l_x) = (l_a / atoms, l_x / atoms);
        let l_l = (0..b).map(|i| (0..6).map(|k| (lattice[i * 6 + k] - t_lattice[i * 6 + k]).powi(2)).sum::<f64>()).sum::<f64>() / b as f64;
        let kl = (0..rows)
            .map(|r| {
                (0..d)
                    .map(|k| {
                        let (m, ls) = (mu[r * d + k], log_sigma[r * d + k]);
                        0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / rows as f64;
        let sq = (0..rows).map(|r| (0..d).map(|k| (z[r * d + k] - e[r * d + k]).powi(2)).sum::<f64>()).sum::<f64>() / rows as f64;
        let expect_vae = l_a + l_x + l_l + weight * kl;
        let expect_vq = l_a + l_x + l_l + weight * 2.0 * sq;
        for (got, want) in [
            (scalar(&vae.species), l_a),
            (scalar(&vae.coords), l_x),
            (scalar(&vae.lattice), l_l),
            (scalar(&vae.reg), kl),
            (scalar(&vae.total), expect_vae),
            (scalar(&vq.reg), 2.0 * sq),
            (scalar(&vq.total), expect_vq),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    // Monte-Carlo KL against the closed form.
    let mut kl_gap = 0.0f64;
    for _ in 0..10 {
        let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let closed = kl_divergence(&Tensor::from_slice(&mu, (1, 3), &dev).unwrap(), &Tensor::from_slice(&ls, (1, 3), &dev).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for k in 0..3 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let x = mu[k] + ls[k].exp() * eps;
                // log q(x) − log p(x)
                acc += -ls[k] - 0.5 * eps * eps + 0.5 * x * x;
            }
        }
        kl_gap = kl_gap.max((acc / n as f64 - closed).abs());
    }
    outcome(
        5,
        "loss arithmetic",
        worst < 1e-6 && kl_gap < 1e-2,
        format!("max |loss − scalar oracle| {worst:.2e} over 10 batches, max |KL closed form − Monte-Carlo (10^6 samples)| {kl_gap:.4}"),
    )
}

/// Quadratic reference implementation of the per-crystal flags.
fn naive_flags(generated: &[Crystal<f64>], reference: &[Crystal<f64>], oracle: &ToyOracle, cfg: MatcherConfig) -> Vec<[bool; 4]> {
    generated
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let valid = check_validity(c).is_valid();
            let stable = oracle.relax(c).and_then(|r| oracle.energy_above_hull(&r)).is_ok_and(|h| h.e_hull <= STABILITY_THRESHOLD);
            let unique = !generated[..i].iter().any(|g| structures_match(g, c, cfg));
            let novel = !reference.iter().any(|r| structures_match(c, r, cfg));
            [valid, stable, unique, novel]
        })
        .collect()
}

fn rotate_translate_permute(c: &Crystal<f64>, rng: &mut impl Rng) -> Crystal<f64> {
    let r = random_rotation(rng);
    let shift: Vec3<f64> = [0; 3].map(|_: i32| rng.random_range(-3.0..3.0));
    let rot = |v: &Vec3<f64>| [0, 1, 2].map(|i| r[(i, 0)] * v[0] + r[(i, 1)] * v[1] + r[(i, 2)] * v[2]);
    let l = Mat3::from_rows([0, 1, 2].map(|i| rot(&c.lattice().row(i))));
    let mut perm: Vec<usize> = (0..c.num_atoms()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let coords = perm.iter().map(|&p| rot(&c.cart_coords()[p])).map(|v| [v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]]).collect();
    let z = perm.iter().map(|&p| c.atomic_numbers()[p]).collect();
    Crystal::new(l, coords, z).unwrap()
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    /// Copy of a reference crystal: valid, stable, not novel.
    Known,
    /// Formula absent from the reference: valid, stable (no reference), novel.
    Fresh,
    /// Reference crystal compressed to 60%: valid, unstable, novel.
    Squeezed,
    /// Two atoms 0.3 Å apart.
    Broken,
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let t = |k, s: &[u8], a| build_template(k, s, a, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let reference = vec![t(TemplateKind::RockSalt, &[11, 17], 5.6), t(TemplateKind::CsCl, &[11, 17], 3.4), t(TemplateKind::Fluorite, &[20, 17], 6.3)];
    let squeeze = |c: &Crystal<f64>| Crystal::from_fractional(c.lattice().scale(0.6), &c.frac_coords(), c.atomic_numbers().to_vec()).unwrap();
    let broken = |z: [u8; 2]| Crystal::new(Mat3::diag([5.0; 3]), vec![[1.0; 3], [1.3, 1.0, 1.0]], z.to_vec()).unwrap();
    let pool: Vec<(Kind, Crystal<f64>)> = vec![
        (Kind::Known, reference[0].clone()),
        (Kind::Known, reference[1].clone()),
        (Kind::Known, reference[2].clone()),
        (Kind::Fresh, t(TemplateKind::RockSalt, &[12, 8], 4.2)),
        (Kind::Fresh, t(TemplateKind::HexagonalAb, &[12, 8], 3.5)),
        (Kind::Fresh, t(TemplateKind::Rutile, &[22, 8], 4.6)),
        (Kind::Squeezed, squeeze(&reference[0])),
        (Kind::Squeezed, squeeze(&reference[2])),
        (Kind::Broken, broken([11, 17])),
        (Kind::Broken, broken([12, 8])),
    ];
    let oracle = ToyOracle::with_references(ToyOracleParams::default(), &reference).unwrap();
    let cfg = MatcherConfig::default();
    let matcher = FingerprintMatcher::new(cfg);
    let (mut agree_oracle, mut agree_tally, mut identities) = (0, 0, 0);
    for fixture in 0..20 {
        let n = 4 + fixture % 9;
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.len())).collect();
        let generated: Vec<Crystal<f64>> = picks.iter().map(|&p| rotate_translate_permute(&pool[p].1, &mut rng)).collect();
        let report = compute_metrics(&generated, &reference, &oracle, &matcher);
        let flags: Vec<[bool; 4]> = report.flags.iter().map(|f: &CrystalFlags| [f.valid, f.stable, f.unique, f.novel]).collect();
        agree_oracle += (flags == naive_flags(&generated, &reference, &oracle, cfg)) as usize;

        // Tallies from the construction alone.
        let mut seen = Vec::new();
        let (mut v, mut s, mut u, mut nv, mut vsun) = (0, 0, 0, 0, 0);
        for &p in &picks {
            let kind = pool[p].0;
            let first = !seen.contains(&p);
            seen.push(p);
            if kind == Kind::Broken {
                continue;
            }
            v += 1;
            let stable = matches!(kind, Kind::Known | Kind::Fresh);
            let novel = matches!(kind, Kind::Fresh | Kind::Squeezed);
            s += stable as usize;
            u += first as usize;
            nv += novel as usize;
            vsun += (stable && novel && first) as usize;
        }
        let f = |k: usize| k as f64 / n as f64;
        let h = report.headline;
        agree_tally += (h.v == f(v) && h.s == f(s) && h.u == f(u) && h.n == f(nv) && h.vsun == f(vsun)) as usize;
        let r = report.raw;
        identities += (h.vsun <= h.sun && h.vsun <= r.v.min(r.s).min(r.u).min(r.n) + 1e-12) as usize;
    }
    outcome(
        7,
        "metrics correctness",
        agree_oracle == 20 && agree_tally == 20 && identities == 20,
        format!("{agree_oracle}/20 fixtures equal the quadratic oracle, {agree_tally}/20 equal the hand tallies, identities hold on {identities}/20"),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let data = make_synthetic_dataset(&ccgen_core::synthetic::default_specs(40, 0.05), 8).unwrap();
    let cfg = MatcherConfig::default();
    let (mut refl, mut sym, mut inv, mut matched_pairs) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let a = &data[rng.random_range(0..data.len())].crystal;
        refl += structures_match(a, a, cfg) as usize;
        // A partner that sometimes matches: a jittered copy or another crystal.
        let b = if rng.random_bool(0.5) {
            let sigma = rng.random_range(0.0..0.4);
            let coords = a.cart_coords().iter().map(|x| x.map(|v| v + sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))).collect();
            Crystal::new(*a.lattice(), coords, a.atomic_numbers().to_vec()).unwrap()
        } else {
            data[rng.random_range(0..data.len())].crystal.clone()
        };
        let ab = structures_match(a, &b, cfg);
        matched_pairs += ab as usize;
        sym += (ab == structures_match(&b, a, cfg)) as usize;
        let moved = rotate_translate_permute(a, &mut rng);
        inv += (structures_match(a, &moved, cfg) && structures_match(&moved, &b, cfg) == ab) as usize;
    }
    outcome(
        8,
        "matcher properties",
        refl == 1000 && sym == 1000 && inv == 1000,
        format!("reflexive {refl}/1000, symmetric {sym}/1000 ({matched_pairs} matching pairs), invariant {inv}/1000"),
    )
}

fn report(dir: &Path, name: &str) -> Value {
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap();
    v["report"].clone()
}

struct SeedRun {
    seed: u64,
    dir: tempfile::TempDir,
    vqvae_time: Duration,
    total_time: Duration,
}

fn desk_run(seed: u64, interpret: bool) -> ccgen::Result<SeedRun> {
    let mut config = RunConfig::preset(Preset::Desk);
    config.seed = seed;
    config.stages.interpret = interpret;
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(config, dir.path(), false)?;
    let t = Instant::now();
    run.run_pipeline(Some(Stage::TrainVqvae))?;
    let vqvae_time = t.elapsed();
    run.run_pipeline(Some(Stage::Evaluate))?;
    let total_time = t.elapsed();
    run.run_pipeline(None)?;
    Ok(SeedRun { seed, dir, vqvae_time, total_time })
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let r = &runs[0];
    let ratio = report(r.dir.path(), "vqvae_report.json")["reconstruction_match_ratio"].as_f64().unwrap();
    let others: Vec<String> =
        runs[1..].iter().map(|s| format!("seed {}: {:.3}", s.seed, report(s.dir.path(), "vqvae_report.json")["reconstruction_match_ratio"])).collect();
    outcome(
        6,
        "desk VQ-VAE reconstruction",
        ratio >= 0.80 && r.vqvae_time <= Duration::from_secs(20 * 60),
        format!("seed 0 match ratio {ratio:.3} (≥ 0.80) in {:.0}s; {}", r.vqvae_time.as_secs_f64(), others.join(", ")),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let mut unrefined = Vec::new();
    let mut refined = Vec::new();
    let mut gains = Vec::new();
    let mut lines = Vec::new();
    for r in runs {
        let rr = report(r.dir.path(), "refine_report.json");
        let u = rr["unrefined_qualified_fraction"].as_f64().unwrap();
        let f = rr["refined_qualified_fraction"].as_f64().unwrap_or(f64::NAN);
        let ev = report(r.dir.path(), "evaluation.json");
        let (c, n) = (ev["conditional"]["novelty_fraction"].as_f64().unwrap(), ev["unconditional"]["novelty_fraction"].as_f64().unwrap());
        lines.push(format!("seed {}: qualified {u:.3}→{f:.3}, novelty cond {c:.3} vs uncond {n:.3}", r.seed));
        unrefined.push(u);
        refined.push(if f.is_nan() { f64::NEG_INFINITY } else { f });
        gains.push(c - n);
    }
    let total: Duration = runs.iter().map(|r| r.total_time).sum();
    let (mu, mr, mg) = (median(unrefined), median(refined), median(gains));
    outcome(
        9,
        "pipeline effect",
        mr > mu && mg >= 0.05 && total <= Duration::from_secs(3600),
        format!(
            "median qualified fraction {mu:.3} unrefined vs {mr:.3} refined, median novelty gain {:.1} points (≥ 5), {:.0}s total; {}",
            100.0 * mg,
            total.as_secs_f64(),
            lines.join("; ")
        ),
    )
}

fn criterion_10(runs: &[SeedRun]) -> Outcome {
    let mut means = Vec::new();
    let mut gaps = Vec::new();
    for r in runs {
        let ev = report(r.dir.path(), "evaluation.json");
        let m = ev["conditional"]["adherence_mean"].as_f64().unwrap();
        let b = ev["conditional"]["adherence_random_baseline"].as_f64().unwrap();
        means.push(m);
        gaps.push(m - b);
    }
    let detail = format!(
        "median adherence {:.3} (≥ 0.5), median margin over random pairing {:.3} (≥ 0.2); per seed {:?}",
        median(means.clone()),
        median(gaps.clone()),
        means.iter().zip(&gaps).map(|(m, g)| format!("{m:.3}/+{g:.3}")).collect::<Vec<_>>()
    );
    outcome(10, "composition adherence", median(means) >= 0.5 && median(gaps) >= 0.2, detail)
}

fn criterion_11(runs: &[SeedRun]) -> Outcome {
    let vq = VqVae::from_checkpoint(&Checkpoint::load(&runs[0].dir.path().join("vqvae.json")).unwrap()).unwrap();
    let data: Vec<LabeledCrystal> = make_synthetic_dataset(&three_family_specs(50, 0.05), 1111).unwrap();
    let (_, rep) = train_symmetry_classifier(&data, &vq, &ClassifierConfig::desk(), 0).unwrap();
    let pipeline = report(runs[0].dir.path(), "classifier.json");
    outcome(
        11,
        "symmetry classifier",
        rep.family_accuracy >= 0.9,
        format!(
            "three-family family accuracy {:.3} (≥ 0.9), space group {:.3}, test size {}; pipeline run: family {:.3}; full-scale reference 67.11% / 77.37% not reproduced at this size",
            rep.family_accuracy,
            rep.space_group_accuracy,
            rep.test_size,
            pipeline["classifier"]["family_accuracy"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())).collect()
}

fn criterion_12() -> Outcome {
    let config = RunConfig::resolve(Some(TINY), &[]).unwrap();
    let full = |dir: &Path| Run::open(config.clone(), dir, false).unwrap().run_pipeline(None).unwrap();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full(a.path());
    full(b.path());

    // Stop after sampling, then simulate a kill in the middle of `generate`:
    // its outputs are half written and the state never recorded it.
    Run::open(config.clone(), c.path(), false).unwrap().run_pipeline(Some(Stage::Sample)).unwrap();
    Run::open(config.clone(), c.path(), false).unwrap().run_pipeline(Some(Stage::Generate)).unwrap();
    let state_path = c.path().join("state.json");
    let mut state: Value = serde_json::from_slice(&std::fs::read(&state_path).unwrap()).unwrap();
    state["completed"].as_array_mut().unwrap().retain(|s| s != "generate");
    std::fs::write(&state_path, serde_json::to_vec_pretty(&state).unwrap()).unwrap();
    let partial = c.path().join("generated_conditional.jsonl");
    let bytes = std::fs::read(&partial).unwrap();
    std::fs::write(&partial, &bytes[..bytes.len() / 2]).unwrap();
    std::fs::write(c.path().join("generated_unconditional.jsonl.tmp"), b"{\"trunc").unwrap();
    let resumed = Run::open(config.clone(), c.path(), false).unwrap().run_pipeline(None).unwrap();
    std::fs::remove_file(c.path().join("generated_unconditional.jsonl.tmp")).ok();

    let (da, db, dc) = (dir_bytes(a.path()), dir_bytes(b.path()), dir_bytes(c.path()));
    let differing = |x: &BTreeMap<String, Vec<u8>>, y: &BTreeMap<String, Vec<u8>>| {
        x.keys().chain(y.keys()).filter(|k| x.get(*k) != y.get(*k)).cloned().collect::<std::collections::BTreeSet<_>>()
    };
    let (rerun, resume) = (differing(&da, &db), differing(&da, &dc));
    outcome(
        12,
        "reproducibility",
        rerun.is_empty() && resume.is_empty() && resumed.executed.first() == Some(&Stage::Generate),
        format!(
            "{} files compared; rerun differs in {rerun:?}, kill-and-resume (resumed at {:?}) differs in {resume:?}",
            da.len(),
            resumed.executed.first()
        ),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_7(), criterion_8(), criterion_12()];
    let runs: Vec<SeedRun> = SEEDS
        .iter()
        .filter_map(|&s| match desk_run(s, s == 0) {
            Ok(r) => Some(r),
            Err(e) => {
                println!("desk pipeline for seed {s} failed: {e}");
                None
            }
        })
        .collect();
    if runs.len() == SEEDS.len() {
        outcomes.extend([criterion_6(&runs), criterion_9(&runs), criterion_10(&runs), criterion_11(&runs)]);
    } else {
        for (id, name) in [(6, "desk VQ-VAE reconstruction"), (9, "pipeline effect"), (10, "composition adherence"), (11, "symmetry classifier")] {
            outcomes.push(outcome(id, name, false, "desk pipeline did not complete".into()));
        }
    }
    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary");
    for o in &outcomes {
        println!("  {:>2} {:<28} {}  {}", o.id, o.name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
