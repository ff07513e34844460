//! Throwaway diagnostic probe (deleted before commit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wklab::action::{action_derivatives, fundamental_solution, ActionParams};
use wklab::dynamics::{Potential, TonelliModel};
use wklab::geom::Domain;

#[test]
fn probe_action_gradient_components() {
    let domain = Domain::torus(1);
    let model = TonelliModel::new(domain, Potential::Cosine { amplitude: 1.0 }).unwrap();
    let params = ActionParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x77AB1E5);
    let h = 1e-5;
    for k in 0..8 {
        let x = [rng.gen::<f64>(), 0.0];
        let mut y = x;
        y[0] = (x[0] + rng.gen_range(-0.4..0.4)).rem_euclid(1.0);
        let t = rng.gen_range(0.15..1.0);
        let r = fundamental_solution(&model, x, y, t, &params).unwrap();
        let d = action_derivatives(&model, &r);
        let fd_x = (fundamental_solution(&model, [x[0] + h, 0.0], y, t, &params).unwrap().value
            - fundamental_solution(&model, [x[0] - h, 0.0], y, t, &params).unwrap().value)
            / (2.0 * h);
        let fd_y = (fundamental_solution(&model, x, [y[0] + h, 0.0], t, &params).unwrap().value
            - fundamental_solution(&model, x, [y[0] - h, 0.0], t, &params).unwrap().value)
            / (2.0 * h);
        let fd_t = (fundamental_solution(&model, x, y, t + h, &params).unwrap().value
            - fundamental_solution(&model, x, y, t - h, &params).unwrap().value)
            / (2.0 * h);
        let ex = (fd_x - d.d_start[0]).abs() / fd_x.abs().max(1.0);
        let ey = (fd_y - d.d_end[0]).abs() / fd_y.abs().max(1.0);
        let et = (fd_t - d.d_time).abs() / fd_t.abs().max(1.0);
        println!(
            "k={k} x={:.3} y={:.3} t={:.4} K={} | ex={ex:.3e} ey={ey:.3e} et={et:.3e}",
            x[0],
            y[0],
            t,
            r.curve.len() - 1
        );
    }
}
