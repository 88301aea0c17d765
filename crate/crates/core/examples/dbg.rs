use gapwave_core::bands::{find_gaps, locate_touchpoints, sweep, TouchOptions};
use gapwave_core::medium::{DielectricProfile, Rect};
use gapwave_core::unitcell::CellSolver;
use std::f64::consts::PI;

fn main() {
    let p = DielectricProfile::new(
        1.0,
        vec![Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 9.0 }],
        vec![],
        0.0,
    )
    .unwrap();
    let solver = CellSolver::new(&p, PI, 5, 4).unwrap();
    let bs = sweep(&solver, 65).unwrap();
    let sorted = bs.sorted_bands();
    for sp in 0..4 {
        let mx = sorted[sp].iter().cloned().fold(f64::MIN, f64::max);
        let mn = sorted[sp].iter().cloned().fold(f64::MAX, f64::min);
        println!("sorted band {}: [{:.6}, {:.6}]", sp + 1, mn, mx);
    }
    let gaps = find_gaps(&bs, 1e-6);
    for g in &gaps {
        println!("gap s'={} ({:.6},{:.6})", g.s_prime, g.mu0, g.mu1);
    }
    let g = gaps[0];
    let row = &bs.bands[g.s_prime - 1];
    println!("band {} at j=0..4: {:?}", g.s_prime, &row[0..4]);
    println!("band {} at end: {:?}", g.s_prime, &row[61..65]);
    println!("band {} mid: {:?}", g.s_prime, &row[30..35]);
    println!("ambiguities: {}", bs.ambiguities.len());
    match locate_touchpoints(&bs, &g, &TouchOptions::default()) {
        Ok(ts) => {
            for t in &ts {
                println!("touch kp={:.6} mp={} gp={:.6} R={:.3} res={:.2e}", t.kp, t.mp, t.gp, t.fit_radius, t.fit_residual);
            }
        }
        Err(e) => println!("touch error: {e}"),
    }
}
