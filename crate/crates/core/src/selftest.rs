//! Quick invariant checks runnable from the command line without test tooling.

use crate::config::EditConfig;
use crate::denoiser::{attention, NoHook, StepWindow};
use crate::edit::regularize::regularize_scores;
use crate::eval::{l1, mse, psnr, ssim};
use crate::guidance::cfg_combine;
use crate::localization::{extract_roi, kmeans_points, mask_at_resolution, LabelMap, RoIMask};
use crate::prng::Prng;
use crate::tensor::{softmax_lastdim, Tensor};
use crate::tensor_io::{encode_tensor, read_tensor};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

type CheckFn = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn masked_softmax() -> Result<(), String> {
    let mut rng = Prng::new(1);
    for case in 0..100 {
        let scores =
            Tensor::from_fn(&[16, 77], |_| (rng.next_uniform() * 10.0 - 5.0) as f32).unwrap();
        let mask: Vec<bool> = (0..16).map(|_| rng.next_uniform() < 0.5).collect();
        let s: Vec<usize> = (0..77).filter(|_| rng.next_uniform() < 0.7).collect();
        if s.len() == 77 {
            continue;
        }
        let p = softmax_lastdim(&regularize_scores(&scores, &mask, &s).map_err(|e| e.to_string())?);
        let base = softmax_lastdim(&scores);
        for (i, (row, brow)) in p
            .data()
            .chunks_exact(77)
            .zip(base.data().chunks_exact(77))
            .enumerate()
        {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            ensure((sum - 1.0).abs() <= 1e-6, || {
                format!("case {case} row {i} sums to {sum}")
            })?;
            if mask[i] {
                let leak: f64 = s.iter().map(|&t| row[t] as f64).sum();
                ensure(leak <= 1e-7, || format!("case {case} row {i} leaks {leak}"))?;
            } else {
                ensure(row == brow, || {
                    format!("case {case} unmasked row {i} changed")
                })?;
            }
        }
    }
    Ok(())
}

fn cfg_identities() -> Result<(), String> {
    let mut rng = Prng::new(2);
    let mut r = || Tensor::from_fn(&[64, 64, 4], |_| rng.next_gaussian() as f32).unwrap();
    let (a, b, c) = (r(), r(), r());
    let e = |si, st| cfg_combine(&a, &b, &c, si, st).map_err(|e| e.to_string());
    ensure(e(1.0, 1.0)? == c, || "s_I = s_T = 1 must give e_it".into())?;
    ensure(e(1.0, 0.0)? == b, || {
        "s_I = 1, s_T = 0 must give e_iu".into()
    })
}

fn kmeans_blobs() -> Result<(), String> {
    // Two tight blobs of six points, far apart: the optimum splits them.
    let pts: Vec<f32> = (0..12)
        .flat_map(|i| {
            let off = if i < 6 { 0.0 } else { 100.0 };
            [off + (i % 3) as f32 * 0.1, off + (i % 2) as f32 * 0.1]
        })
        .collect();
    let o = kmeans_points(&pts, 2, 2, 3).map_err(|e| e.to_string())?;
    let expected: Vec<u32> = (0..12).map(|i| u32::from(i >= 6)).collect();
    ensure(o.labels == expected, || format!("labels {:?}", o.labels))?;
    ensure(o.trace.windows(2).all(|w| w[1] <= w[0]), || {
        "cost increased".into()
    })
}

fn roi_properties() -> Result<(), String> {
    let mut rng = Prng::new(4);
    for case in 0..50 {
        let k = 1 + rng.next_below(6);
        let labels: Vec<u32> = (0..256 * 256)
            .map(|i| (((i / 256) / 64 * 4 + (i % 256) / 64) % k) as u32)
            .collect();
        let seg = LabelMap::new(256, labels, k).map_err(|e| e.to_string())?;
        let pts: Vec<(usize, usize)> = (0..1 + rng.next_below(5))
            .map(|_| (rng.next_below(64), rng.next_below(64)))
            .collect();
        let roi = extract_roi(&seg, &pts).map_err(|e| e.to_string())?;
        for &(r, c) in &pts {
            ensure(roi.get(r, c), || {
                format!("case {case}: point ({r}, {c}) outside RoI")
            })?;
        }
        let more = extract_roi(&seg, &[pts.clone(), vec![(rng.next_below(64), 0)]].concat())
            .map_err(|e| e.to_string())?;
        ensure(more.contains_mask(&roi), || {
            format!("case {case}: RoI shrank")
        })?;
    }
    let one = RoIMask::from_fn(|r, c| (r, c) == (0, 0));
    for res in [64, 32, 16] {
        ensure(
            mask_at_resolution(&one, res).map_err(|e| e.to_string())?[0],
            || format!("corner cell lost at {res}"),
        )?;
    }
    Ok(())
}

fn attention_hand_case() -> Result<(), String> {
    let q = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let k = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
    let v = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
    let (out, _) = attention(&q, &k, &v, &NoHook).map_err(|e| e.to_string())?;
    let p2 = 1.0 / (1.0 + (-1f64).exp());
    ensure((out.data()[0] as f64 - p2).abs() <= 1e-7, || {
        format!("out {} vs {p2}", out.data()[0])
    })
}

fn metric_identities() -> Result<(), String> {
    let mut rng = Prng::new(5);
    let a = Tensor::from_fn(&[32, 32, 3], |_| rng.next_uniform() as f32).unwrap();
    let m = |r: crate::Result<f64>| r.map_err(|e| e.to_string());
    ensure(m(l1(&a, &a))? == 0.0 && m(mse(&a, &a))? == 0.0, || {
        "identity not zero".into()
    })?;
    ensure(m(ssim(&a, &a))? == 1.0, || "ssim(a, a) != 1".into())?;
    ensure(m(psnr(&a, &a))? == 99.0, || "psnr cap not applied".into())?;
    let x = Tensor::new(&[2, 2, 1], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
    let y = Tensor::new(&[2, 2, 1], vec![0.5, 0.5, 0.0, 0.25]).unwrap();
    ensure(m(l1(&x, &y))? == 0.375, || "hand l1 != 0.375".into())
}

fn window_arithmetic() -> Result<(), String> {
    let f = StepWindow::new(30, 50).map_err(|e| e.to_string())?;
    let a = StepWindow::new(1, 75).map_err(|e| e.to_string())?;
    let f_steps = (1..=100).filter(|&s| f.contains(s)).count();
    let a_steps = (1..=100).filter(|&s| a.contains(s)).count();
    ensure((f_steps, a_steps) == (21, 75), || {
        format!("{f_steps} and {a_steps} steps")
    })
}

fn serialization_roundtrips() -> Result<(), String> {
    let t = Tensor::from_fn(&[3, 5, 2], |i| (i as f32).sqrt()).unwrap();
    let back = read_tensor(&encode_tensor(&t)[..], "memory").map_err(|e| e.to_string())?;
    ensure(back == t, || "tensor dump roundtrip".into())?;
    let c = EditConfig::default();
    let parsed = EditConfig::from_document(&c.to_document()).map_err(|e| e.to_string())?;
    ensure(parsed == c, || "config roundtrip".into())
}

/// Run every check in a fixed order.
pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 8] = [
        ("masked softmax zeroing", masked_softmax),
        ("guidance identities", cfg_identities),
        ("k-means on separated blobs", kmeans_blobs),
        ("RoI properties", roi_properties),
        ("attention hand case", attention_hand_case),
        ("metric identities", metric_identities),
        ("capture window arithmetic", window_arithmetic),
        ("serialization round trips", serialization_roundtrips),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
