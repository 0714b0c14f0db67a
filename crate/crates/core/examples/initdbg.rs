// Stage-by-stage inspection of the data-driven initialization.

use isac_dbd_core::eval::{derive_seed, SIGMA2_Z_FLOOR};
use isac_dbd_core::init::data_driven_init;
use isac_dbd_core::model::{generate_scene, simulate, AmpDist};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let l: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let sigma2_z: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(SIGMA2_Z_FLOOR);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let n = 4;

    let (mut model, truth) =
        generate_scene(n, k, l, l, AmpDist::StandardNormal, derive_seed(seed, 1)).unwrap();
    model.sigma2_z = sigma2_z;
    let traj = simulate(&model, &truth, derive_seed(seed, 2)).unwrap();

    let mut sup_r = truth.support_r();
    sup_r.sort();
    let mut sup_c = truth.support_c();
    sup_c.sort();
    println!("true support r: {sup_r:?}");
    println!("true support c: {sup_c:?}");
    println!(
        "true a_r: {:?}",
        isac_dbd_core::ModelParams::companion_coeffs(&model.a_r)
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!(
        "true a_c: {:?}",
        isac_dbd_core::ModelParams::companion_coeffs(&model.a_c)
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );

    // Residuals of y under the polynomial built from the true root union:
    // validates the AR convention and the root-to-coefficients path.
    {
        let mut union_roots: Vec<nalgebra::Complex<f64>> =
            model.a_r.complex_eigenvalues().iter().copied().collect();
        union_roots.extend(model.a_c.complex_eigenvalues().iter().copied());
        let a_star = isac_dbd_core::init::coeffs_from_roots_for_test(&union_roots, 2 * n)
            .expect("true roots must build a polynomial");
        let order = 2 * n;
        // Companion row to lag order.
        let phi_star: Vec<f64> = (0..order).map(|i| a_star[order - 1 - i]).collect();
        let mut worst: f64 = 0.0;
        let mut count = 0;
        let supports: std::collections::BTreeSet<usize> = truth
            .support_r()
            .into_iter()
            .chain(truth.support_c())
            .collect();
        for k0 in order..k {
            // Clean rows only: window free of kicks.
            if (k0 - order..=k0).any(|j| supports.contains(&j)) {
                continue;
            }
            let window_mag = (k0 - order..=k0).map(|j| traj.y[j].abs()).fold(0.0, f64::max);
            if window_mag < 1e-3 {
                continue;
            }
            let pred: f64 = (0..order).map(|i| phi_star[i] * traj.y[k0 - 1 - i]).sum();
            worst = worst.max(((traj.y[k0] - pred) / window_mag).abs());
            count += 1;
        }
        println!("phi* clean-row worst standardized residual: {worst:.3e} over {count} rows");
    }

    let roots_of = |a: &nalgebra::DMatrix<f64>| -> Vec<(f64, f64)> {
        let mut r: Vec<(f64, f64)> = a
            .complex_eigenvalues()
            .iter()
            .map(|e| ((e.re * 1000.0).round() / 1000.0, (e.im * 1000.0).round() / 1000.0))
            .collect();
        r.sort_by(|x, y| x.partial_cmp(y).unwrap());
        r
    };
    let mut union = roots_of(&model.a_r);
    union.extend(roots_of(&model.a_c));
    union.sort_by(|x, y| x.partial_cmp(y).unwrap());
    println!("true roots union: {union:?}");

    match data_driven_init(&traj.y, n) {
        Some(boot) => {
            let mut on_r: Vec<usize> = boot.kicks_r.iter().map(|(p, _)| *p).collect();
            let mut on_c: Vec<usize> = boot.kicks_c.iter().map(|(p, _)| *p).collect();
            on_r.sort();
            on_c.sort();
            println!("boot onsets r: {on_r:?}");
            println!("boot onsets c: {on_c:?}");
            println!(
                "boot a_r: {:?}",
                boot.a_r.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
            println!(
                "boot a_c: {:?}",
                boot.a_c.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
            let mut boot_union = roots_of(&isac_dbd_core::model::make_companion(&boot.a_r));
            boot_union.extend(roots_of(&isac_dbd_core::model::make_companion(&boot.a_c)));
            boot_union.sort_by(|x, y| x.partial_cmp(y).unwrap());
            println!("boot roots union: {boot_union:?}");
        }
        None => println!("data_driven_init returned None"),
    }
}
