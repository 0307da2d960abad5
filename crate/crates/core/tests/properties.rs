use figlut_core::bcq::{self, quantize_rtn, uniform_to_bcq, BcqMatrix, BitPlane};
use figlut_core::engines::{
    grouped_reference, run_dataflow, trace_dataflow, EngineConfig, EngineKind, Weights,
};
use figlut_core::lut::{build_fflut_naive, build_hfflut_naive, read_full, read_half, LutKey};
use figlut_core::numerics::{self, encode_bits, gen_matrix, Dist, FpFormat, Matrix, Rng};
use figlut_core::perf::{cycles, GemmDims};
use half::{bf16, f16};
use proptest::prelude::*;

fn magnitude() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-4..1e-4f64, -1e-7..1e-7f64]
}

fn bcq_strategy() -> impl Strategy<Value = (BcqMatrix, Matrix)> {
    (1usize..24, 1usize..40, 1usize..5, 1usize..5, any::<u64>()).prop_map(
        |(m, n, q, batch, seed)| {
            let mut rng = Rng::new(seed);
            let planes = (0..q)
                .map(|_| BitPlane::from_fn(m, n, |_, _| rng.coin()))
                .collect();
            let alphas = (0..q)
                .map(|_| (0..m).map(|_| 0.1 + rng.next_f64()).collect())
                .collect();
            let offset = (0..m).map(|_| rng.next_f64() - 0.5).collect();
            let bq = BcqMatrix::new(planes, alphas, offset).unwrap();
            let x = gen_matrix(
                &mut rng,
                n,
                batch,
                FpFormat::Fp16,
                Dist::Normal {
                    mean: 0.0,
                    std: 2.0,
                },
            )
            .unwrap();
            (bq, x)
        },
    )
}

proptest! {
    #[test]
    fn fp16_rounding_matches_half(v in magnitude()) {
        let ours = FpFormat::Fp16.round(v);
        let theirs = f16::from_f64(v);
        prop_assert_eq!(ours, theirs.to_f64());
        prop_assert_eq!(encode_bits(ours, FpFormat::Fp16), theirs.to_bits() as u64);
    }

    #[test]
    fn bf16_rounding_matches_half(v in magnitude()) {
        let ours = FpFormat::Bf16.round(v);
        let theirs = bf16::from_f64(v);
        prop_assert_eq!(ours, theirs.to_f64());
        prop_assert_eq!(encode_bits(ours, FpFormat::Bf16), theirs.to_bits() as u64);
    }

    #[test]
    fn fp32_rounding_matches_cast(v in magnitude()) {
        prop_assert_eq!(FpFormat::Fp32.round(v), v as f32 as f64);
    }

    #[test]
    fn rounding_is_idempotent_and_monotone(a in magnitude(), b in magnitude()) {
        for f in FpFormat::ALL {
            let (ra, rb) = (f.round(a), f.round(b));
            prop_assert_eq!(f.round(ra), ra);
            if a <= b {
                prop_assert!(ra <= rb);
            }
        }
    }

    #[test]
    fn matrix_file_roundtrip(rows in 1usize..8, cols in 1usize..8, seed: u64, code in 0usize..4) {
        let format = FpFormat::ALL[code];
        let m = gen_matrix(&mut Rng::new(seed), rows, cols, format, Dist::Normal { mean: 0.0, std: 100.0 }).unwrap();
        let back = numerics::decode_matrix(&numerics::encode_matrix(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn half_table_matches_full(chunk in prop::collection::vec(-100.0..100.0f64, 2..=6)) {
        let mu = chunk.len() as u32;
        let (full, _) = build_fflut_naive(&chunk, FpFormat::Fp32).unwrap();
        let (half, _) = build_hfflut_naive(&chunk, FpFormat::Fp32).unwrap();
        for bits in 0..1u32 << mu {
            let key = LutKey::new(mu, bits).unwrap();
            prop_assert_eq!(read_full(&full, key).unwrap(), read_half(&half, key).unwrap());
        }
    }

    #[test]
    fn rtn_error_within_half_step(rows in 1usize..6, cols in 1usize..30, q in 2u32..=8, seed: u64) {
        let w = gen_matrix(&mut Rng::new(seed), rows, cols, FpFormat::Fp32, Dist::Uniform { lo: -3.0, hi: 5.0 }).unwrap();
        let u = quantize_rtn(&w, q).unwrap();
        let deq = u.dequantize();
        for r in 0..rows {
            let bound = u.scale()[r] / 2.0 * (1.0 + 1e-9);
            for c in 0..cols {
                prop_assert!((w.get(r, c) - deq.get(r, c)).abs() <= bound);
                prop_assert!(u.code(r, c) < 1 << q);
            }
        }
        let b = uniform_to_bcq(&u);
        for r in 0..rows {
            let grid = (0..cols).fold(0.0f64, |m, c| m.max(u.value(r, c).abs()));
            for c in 0..cols {
                prop_assert!((b.value(r, c) - u.value(r, c)).abs() <= 2.0 * FpFormat::Fp64.ulp(grid));
            }
        }
    }

    #[test]
    fn fgbq_roundtrip((bq, _) in bcq_strategy()) {
        let stored = bq.to_storage_precision();
        let back = bcq::decode_bcq(&bcq::encode_bcq(&bq)).unwrap();
        prop_assert_eq!(back, stored);
    }

    #[test]
    fn integer_engines_agree((bq, x) in bcq_strategy(), mu in 2u32..=4) {
        let w = Weights::Bcq(bq);
        let run = |kind| {
            let mut cfg = EngineConfig::new(kind);
            cfg.mu = mu;
            run_dataflow(&cfg, &w, &x).unwrap().y
        };
        let (a, b) = (run(EngineKind::Ifpu), run(EngineKind::FiglutI));
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn figlut_f_matches_grouped_reference((bq, x) in bcq_strategy(), mu in 2u32..=4) {
        let mut cfg = EngineConfig::new(EngineKind::FiglutF);
        cfg.mu = mu;
        let y = run_dataflow(&cfg, &Weights::Bcq(bq.clone()), &x).unwrap().y;
        let expect = grouped_reference(&bq, &x, mu as usize, cfg.act_format, cfg.lut_format(), cfg.accum_format).unwrap();
        prop_assert_eq!(y, expect);
    }

    #[test]
    fn trace_cycles_follow_closed_form(
        m in 1usize..600, n in 1usize..600, batch in 1usize..40, q in 1usize..5, kind_idx in 1usize..6,
    ) {
        let cfg = EngineConfig::new(EngineKind::ALL[kind_idx]);
        let t = trace_dataflow(&cfg, GemmDims::new(m, n, batch, q), q + 1);
        prop_assert_eq!(t.cycles, cycles(&cfg, m, n, batch, q));
    }

    #[test]
    fn rac_reads_independent_of_k(m in 1usize..300, n in 1usize..300, q in 1usize..5, k in 1u32..128) {
        let dims = GemmDims::new(m, n, 4, q);
        let base = trace_dataflow(&EngineConfig::new(EngineKind::FiglutI), dims, q + 1).rac_reads;
        let mut cfg = EngineConfig::new(EngineKind::FiglutI);
        cfg.k = k;
        prop_assert_eq!(trace_dataflow(&cfg, dims, q + 1).rac_reads, base);
    }
}
