use figlut_core::bcq::{uniform_to_bcq, UniformQuant};
use figlut_core::engines::{trace_dataflow, EngineConfig, EngineKind};
use figlut_core::lut::{
    build_fflut_naive, build_hfflut_generator, build_hfflut_naive, count_generator_adds, read_full,
    read_half, GeneratorKind, LutKey,
};
use figlut_core::numerics::{FpFormat, Rng};
use figlut_core::perf::{bank_conflict_sim, BankAccess, BankSpec, GemmDims};

use crate::error::{CliError, Result};
use crate::{Common, VerifyArgs};

struct Ctx {
    seed: u64,
    inject_fault: bool,
}

type Check = fn(&Ctx) -> Result<String, String>;

struct Property {
    suite: &'static str,
    name: &'static str,
    check: Check,
}

const PROPERTIES: &[Property] = &[
    Property {
        suite: "lut",
        name: "table_contents",
        check: table_contents,
    },
    Property {
        suite: "lut",
        name: "half_symmetry",
        check: half_symmetry,
    },
    Property {
        suite: "lut",
        name: "generator_adds",
        check: generator_adds,
    },
    Property {
        suite: "engines",
        name: "rac_count",
        check: rac_count,
    },
    Property {
        suite: "bcq",
        name: "uniform_exactness",
        check: uniform_exactness,
    },
    Property {
        suite: "bank",
        name: "golden_conflicts",
        check: golden_conflicts,
    },
];

pub fn suite_names() -> Vec<&'static str> {
    let mut names: Vec<_> = PROPERTIES.iter().map(|p| p.suite).collect();
    names.dedup();
    names
}

pub fn run(common: &Common, args: &VerifyArgs) -> Result<()> {
    let cfg = common.resolve()?;
    for s in &args.suite {
        if !PROPERTIES.iter().any(|p| p.suite == s || p.name == s) {
            return Err(CliError::validation(format!(
                "unknown suite `{s}` (suites: {})",
                suite_names().join(", ")
            )));
        }
    }
    let ctx = Ctx {
        seed: cfg.seed,
        inject_fault: args.inject_fault,
    };
    let selected = PROPERTIES.iter().filter(|p| {
        args.suite.is_empty() || args.suite.iter().any(|s| s == p.suite || s == p.name)
    });

    let mut failed = Vec::new();
    let mut table = format!("{:<8} {:<18} {:<6} detail\n", "suite", "property", "result");
    for p in selected {
        let (status, detail) = match (p.check)(&ctx) {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(format!("{}/{}", p.suite, p.name));
                ("FAIL", d)
            }
        };
        table += &format!("{:<8} {:<18} {:<6} {}\n", p.suite, p.name, status, detail);
    }
    super::emit(table)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "failed properties: {}",
            failed.join(", ")
        )))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table_contents(_: &Ctx) -> Result<String, String> {
    let x = [1.0, 10.0, 100.0];
    let (full, _) = build_fflut_naive(&x, FpFormat::Fp64).map_err(|e| e.to_string())?;
    let (half, _) = build_hfflut_generator(&x, FpFormat::Fp64).map_err(|e| e.to_string())?;
    for bits in 0..8u32 {
        let expect: f64 = (0..3)
            .map(|j| {
                if bits >> (2 - j) & 1 == 1 {
                    x[j]
                } else {
                    -x[j]
                }
            })
            .sum();
        let key = LutKey::new(3, bits).map_err(|e| e.to_string())?;
        let (f, h) = (
            read_full(&full, key).unwrap(),
            read_half(&half, key).unwrap(),
        );
        ensure(f == expect && h == expect, || {
            format!("key {bits:03b}: full {f}, half {h}, expected {expect}")
        })?;
    }
    Ok("8/8 keys for mu=3".into())
}

fn half_symmetry(ctx: &Ctx) -> Result<String, String> {
    let mut rng = Rng::new(ctx.seed).fork(1);
    let mut reads = 0;
    for mu in 2..=4u32 {
        for trial in 0..200 {
            let chunk: Vec<f64> = (0..mu)
                .map(|_| FpFormat::Fp32.round((rng.next_f64() - 0.5) * 8.0))
                .collect();
            let (full, _) = build_fflut_naive(&chunk, FpFormat::Fp32).map_err(|e| e.to_string())?;
            let (mut half, _) =
                build_hfflut_naive(&chunk, FpFormat::Fp32).map_err(|e| e.to_string())?;
            if ctx.inject_fault && mu == 2 && trial == 0 {
                half.inject_sign_fault(1);
            }
            for bits in 0..1u32 << mu {
                let key = LutKey::new(mu, bits).unwrap();
                let (f, h) = (
                    read_full(&full, key).unwrap(),
                    read_half(&half, key).unwrap(),
                );
                ensure(f == h, || {
                    format!("mu={mu} key {bits:b}: half {h} != full {f}")
                })?;
                reads += 1;
            }
        }
    }
    Ok(format!("{reads} keys, mu in 2..=4"))
}

fn generator_adds(_: &Ctx) -> Result<String, String> {
    let tree = count_generator_adds(4, GeneratorKind::Tree);
    let naive = count_generator_adds(4, GeneratorKind::NaiveHalf);
    ensure(tree == 14 && naive == 24, || {
        format!("tree {tree}, naive half {naive}")
    })?;
    let (_, built) =
        build_hfflut_generator(&[1.0, 2.0, 3.0, 4.0], FpFormat::Fp32).map_err(|e| e.to_string())?;
    ensure(built.additions == tree, || {
        format!("builder performed {} additions", built.additions)
    })?;
    Ok(format!(
        "tree {tree}, naive half {naive}, saving {:.1}%",
        100.0 * (naive - tree) as f64 / naive as f64
    ))
}

fn rac_count(_: &Ctx) -> Result<String, String> {
    let mut points = 0;
    for mu in [2u32, 3, 4] {
        let mut cfg = EngineConfig::new(EngineKind::FiglutI);
        cfg.mu = mu;
        for m in [5, 64, 300] {
            for n in [7, 48, 131] {
                for q in [1, 2, 4] {
                    let batch = 3;
                    let t = trace_dataflow(&cfg, GemmDims::new(m, n, batch, q), q + 1);
                    let expect = (m * batch * q * n.div_ceil(mu as usize)) as u64;
                    ensure(t.rac_reads == expect, || {
                        format!(
                            "m={m} n={n} q={q} mu={mu}: {} reads, expected {expect}",
                            t.rac_reads
                        )
                    })?;
                    points += 1;
                }
            }
        }
    }
    Ok(format!("{points} shapes"))
}

/// `Δ·(c − zero)` as an unevaluated sum `hi + lo` carrying about 106 bits.
fn exact_level(delta: f64, c: f64, zero: f64) -> (f64, f64) {
    let s = c - zero;
    let t = s - c;
    let s_err = (c - (s - t)) + (-zero - t);
    let p = delta * s;
    (p, delta.mul_add(s, -p) + delta * s_err)
}

/// Levels are compared against the exact value; the ulp is taken at the
/// row's largest level, since a level near zero cancels a rounded offset.
fn uniform_exactness(ctx: &Ctx) -> Result<String, String> {
    let mut rng = Rng::new(ctx.seed).fork(2);
    let mut worst = 0.0f64;
    for q in 1..=4u32 {
        let levels = 1usize << q;
        for _ in 0..100 {
            let delta = 2f64.powf(rng.next_f64() * 16.0 - 8.0);
            let zero = rng.next_f64() * (levels - 1) as f64;
            let codes: Vec<u32> = (0..levels as u32).collect();
            let u = UniformQuant::new(1, levels, q, codes, vec![delta], vec![zero])
                .map_err(|e| e.to_string())?;
            let b = uniform_to_bcq(&u);
            let exact: Vec<(f64, f64)> = (0..levels)
                .map(|c| exact_level(delta, c as f64, zero))
                .collect();
            let grid = exact.iter().fold(0.0f64, |m, e| m.max(e.0.abs()));
            for (c, &(hi, lo)) in exact.iter().enumerate() {
                let got = b.value(0, c);
                let err = ((got - hi) - lo).abs() / FpFormat::Fp64.ulp(grid);
                worst = worst.max(err);
                ensure(err <= 1.0, || {
                    format!(
                        "q={q} code {c}: {got} vs {hi} ({err:.2} ulp; delta {delta}, zero {zero})"
                    )
                })?;
            }
        }
    }
    Ok(format!(
        "q in 1..=4, 100 (delta, zero) pairs each, worst {worst:.2} ulp"
    ))
}

fn golden_conflicts(_: &Ctx) -> Result<String, String> {
    let spec = BankSpec::new(4, 4).map_err(|e| e.to_string())?;
    let access = |thread, bank, address| BankAccess {
        thread,
        bank,
        address,
    };
    let cases = [
        (
            "distinct banks",
            (0..4).map(|t| access(t, t, t as u64)).collect::<Vec<_>>(),
            1,
        ),
        (
            "one bank",
            (0..4).map(|t| access(t, 0, t as u64)).collect(),
            4,
        ),
        ("broadcast", (0..4).map(|t| access(t, 2, 7)).collect(), 1),
    ];
    for (name, cycle, expect) in cases {
        let got = bank_conflict_sim(&[cycle], &spec).map_err(|e| e.to_string())?;
        ensure(got == expect, || {
            format!("{name}: {got} cycles, expected {expect}")
        })?;
    }
    Ok("distinct 1, same-bank 4, broadcast 1".into())
}
