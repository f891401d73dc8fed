//! Peek at the synthetic benchmark scenes: who observes what, from where,
//! with how much delay, and which targets the ego cannot see on its own.

use cobev::harness::train::nth_scenario;
use cobev::harness::{Config, Scenario};
use cobev::{Real, Result};

fn main() -> Result<()> {
    let cfg = Config::compact();
    let meta = cfg.meta();
    for k in 0..2 {
        let sc = nth_scenario(&cfg, &meta, 7, "scenario", k)?;
        println!("scene {k}");
        describe(&sc);
        render(&sc, &cfg);
        println!();
    }
    Ok(())
}

fn describe(sc: &Scenario) {
    println!(
        "  ego: {} points now, {} points {:.2}s earlier",
        sc.ego_now.cloud.len(),
        sc.ego_prev.cloud.len(),
        -sc.ego_prev.capture_time
    );
    for (i, r) in sc.remotes.iter().enumerate() {
        println!(
            "  remote {i} ({}): {} points at ({:+.1}, {:+.1}), captured {:.0} ms ago",
            r.agent_type,
            r.cloud.len(),
            r.pose.x,
            r.pose.y,
            -r.capture_time * 1000.0
        );
    }
    for (i, (obj, occ)) in sc.objects.iter().zip(&sc.occluded_from_ego).enumerate() {
        let b = &obj.boxbev;
        let speed = (obj.velocity[0].powi(2) + obj.velocity[1].powi(2)).sqrt();
        println!(
            "  object {i}: {:.1} x {:.1} m at ({:+.1}, {:+.1}), yaw {:+.2}, {:.1} m/s{}",
            b.w,
            b.l,
            b.cx,
            b.cy,
            b.yaw,
            speed,
            if *occ { "  [hidden from ego]" } else { "" }
        );
    }
}

/// Top-down ASCII view: ego points '.', infrastructure points '+', object
/// centers 'O' (or 'X' when the ego cannot see them), the ego 'E'.
fn render(sc: &Scenario, cfg: &Config) {
    let meta = cfg.meta();
    let mut canvas = vec![b' '; meta.h * meta.w];
    let plot = |x: Real, y: Real, ch: u8, canvas: &mut Vec<u8>| {
        let (col, row) = meta.to_cell(x, y);
        let (col, row) = (col.round(), row.round());
        if col >= 0.0 && row >= 0.0 && (col as usize) < meta.w && (row as usize) < meta.h {
            let idx = (row as usize) * meta.w + col as usize;
            if canvas[idx] == b' ' || ch != b'.' {
                canvas[idx] = ch;
            }
        }
    };
    for p in &sc.ego_now.cloud.points {
        plot(p.x, p.y, b'.', &mut canvas);
    }
    for r in &sc.remotes {
        for p in &r.cloud.transform(&r.pose.to_world()).points {
            plot(p.x, p.y, b'+', &mut canvas);
        }
    }
    for (obj, occ) in sc.objects.iter().zip(&sc.occluded_from_ego) {
        let b = &obj.boxbev;
        plot(b.cx, b.cy, if *occ { b'X' } else { b'O' }, &mut canvas);
    }
    plot(sc.ego_now.pose.x, sc.ego_now.pose.y, b'E', &mut canvas);

    println!("  +{}+", "-".repeat(meta.w));
    for r in (0..meta.h).rev() {
        let line: String = canvas[r * meta.w..(r + 1) * meta.w].iter().map(|&b| b as char).collect();
        println!("  |{line}|");
    }
    println!("  +{}+", "-".repeat(meta.w));
    println!("  legend: . ego lidar   + roadside lidar   O target   X occluded target   E ego");
}
