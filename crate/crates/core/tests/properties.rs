//! Property tests for the data layer.

use std::collections::HashSet;

use proptest::prelude::*;

use msm_iv_core::dgp::HistTable;
use msm_iv_core::panel::{enumerate_regimes, load_panel, save_panel, CsvSchema, Panel};

proptest! {
    /// The regime enumeration is duplicate-free with cardinality 2^J.
    #[test]
    fn regime_enumeration_is_complete(j in 1usize..=10) {
        let regimes = enumerate_regimes(j).unwrap();
        prop_assert_eq!(regimes.len(), 1 << j);
        let distinct: HashSet<_> = regimes.iter().map(|r| r.bits().to_vec()).collect();
        prop_assert_eq!(distinct.len(), regimes.len());
        for r in &regimes {
            prop_assert_eq!(r.len(), j);
            prop_assert!(r.bits().iter().all(|b| *b <= 1));
        }
    }

    /// Load of a saved panel reproduces the panel contents.
    #[test]
    fn panel_round_trip(
        n in 1usize..6,
        j in 1usize..4,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = msm_iv_core::util::stream_rng(seed, 99, 0);
        let mut l = Vec::new();
        let mut z = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            ids.push(format!("s{i:03}"));
            for _t in 0..j {
                l.push(f64::from(rng.gen_range(0..2)));
                l.push(rng.gen_range(-2.0..2.0_f64));
            }
            let yi = rng.gen_range(-5.0..5.0_f64);
            l.push(yi);
            l.push(0.0);
            for _t in 0..j {
                z.push(rng.gen_range(0..2) as u8);
                a.push(rng.gen_range(0..2) as u8);
            }
            y.push(yi);
        }
        let panel = Panel::from_parts(
            ids,
            vec!["l".into(), "w".into()],
            l,
            z,
            a,
            y,
            j,
            vec![],
            0,
        )
        .unwrap();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_panel(&panel, file.path()).unwrap();
        let back = load_panel(file.path(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(back.n(), panel.n());
        prop_assert_eq!(back.occasions(), panel.occasions());
        for i in 0..panel.n() {
            prop_assert_eq!(back.y(i), panel.y(i));
            for t in 0..panel.occasions() {
                prop_assert_eq!(back.z(i, t), panel.z(i, t));
                prop_assert_eq!(back.a(i, t), panel.a(i, t));
                for c in 0..panel.l_cols() {
                    prop_assert_eq!(back.l(i, t, c), panel.l(i, t, c));
                }
            }
        }
    }

    /// History tables survive JSON round trips exactly.
    #[test]
    fn hist_table_round_trip(bits in 1usize..5, seed in 0u64..1000) {
        use msm_iv_core::dgp::Var;
        use rand::Rng;
        let mut rng = msm_iv_core::util::stream_rng(seed, 98, 0);
        let vars: Vec<Var> = (0..bits).map(Var::l).collect();
        let values: Vec<f64> = (0..(1 << bits)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let table = {
            let values = values.clone();
            HistTable::build(vars, move |h| {
                let mut idx = 0usize;
                for (pos, t) in (0..bits).enumerate() {
                    idx |= usize::from(h(Var::l(t))) << pos;
                }
                values[idx]
            })
        };
        let json = serde_json::to_string(&table).unwrap();
        let back: HistTable = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(table, back);
    }
}
