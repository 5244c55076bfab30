use cms_lstm::checkpoint;
use cms_lstm::data::Dataset;
use cms_lstm::export::{parse_pgm, pgm_bytes};
use cms_lstm::nn::{AdamW, ParamEntry, ParamStore};
use cms_lstm::RunConfig;
use cms_tensor::Tensor;
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..5, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, t, c, h, w)| {
        prop::collection::vec(any::<u8>(), n * t * c * h * w).prop_map(move |bytes| Dataset {
            len: n,
            frames: t,
            height: h,
            width: w,
            channels: c,
            bytes,
        })
    })
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(finite(), n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

fn store() -> impl Strategy<Value = ParamStore> {
    prop::collection::vec((tensor(), finite(), finite()), 1..5).prop_map(|entries| {
        let mut s = ParamStore::new();
        for (i, (value, m, v)) in entries.into_iter().enumerate() {
            let mut e = ParamEntry::new(value);
            e.m = e.value.map(|x| x * m);
            e.v = e.value.map(|x| (x * v).abs());
            s.insert(format!("p{i}.weight"), e);
        }
        s
    })
}

proptest! {
    #[test]
    fn stsq_round_trip(d in dataset()) {
        let bytes = d.encode();
        let back = Dataset::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, d);
    }

    #[test]
    fn stsq_rejects_every_truncation(d in dataset(), cut in 0.0f64..1.0) {
        let bytes = d.encode();
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(Dataset::decode(&bytes[..n]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(s in store(), step in any::<u64>(), lr in finite(), wd in finite()) {
        let mut opt = AdamW::new(lr, wd);
        opt.step = step;
        let bytes = checkpoint::encode(&s, &opt);
        let (s2, o2) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&s2, &o2), bytes);
        prop_assert_eq!(o2, opt);
        prop_assert_eq!(s2, s);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let px: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        prop_assert_eq!(parse_pgm(&pgm_bytes(w, h, &px)).unwrap(), (w, h, px));
    }

    #[test]
    fn config_text_round_trip(
        layers in 1usize..5,
        hidden in 1usize..64,
        ce in any::<bool>(),
        se in any::<bool>(),
        lr in 1e-6f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.model.layers = layers;
        cfg.model.hidden = hidden;
        cfg.model.enable_ce = ce;
        cfg.model.enable_se = se;
        cfg.lr = lr;
        cfg.init_seed = seed;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
