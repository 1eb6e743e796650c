use invtrans_core::numerics::gaussian;
use invtrans_core::{DimSpec, InnModel, RngState};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = DimSpec> {
    (1usize..12, 1usize..6, 1usize..4, 0usize..4).prop_map(|(d_x, d_y, d_z, extra)| {
        let need = d_x.max(d_y + d_z);
        let d_total = need + need % 2 + 2 * extra;
        DimSpec::new(d_x, d_y, d_z, d_total).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_undoes_forward(
        spec in spec(),
        layers in 1usize..5,
        hidden in 1usize..16,
        sigma in 0.0f64..0.05,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let mut model = InnModel::new(spec, layers, hidden, 2.0, &mut rng).unwrap();
        model.perturb(&mut rng, sigma);
        let x = gaussian(&mut rng, 8, spec.d_total, 1.0).unwrap();

        let (out, _) = model.forward_full(&x).unwrap();
        let (back, _) = model.inverse_full(&out).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-10 * out.max_abs().max(1.0));

        let (pre, _) = model.inverse_full(&x).unwrap();
        let (again, _) = model.forward_full(&pre).unwrap();
        prop_assert!(again.max_abs_diff(&x) <= 1e-10 * pre.max_abs().max(1.0));
    }

}
