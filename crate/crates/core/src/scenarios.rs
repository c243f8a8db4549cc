//! Preset pipeline configurations for the shipped scenarios.

use crate::pipeline::PipelineConfig;
use crate::simworld::{rect, rect_walls, BoxSpec, DriftConfig, RoomSpec, SceneSpec, StaircaseSpec, WallSpec};

pub const NAMES: [&str; 4] = ["staircase", "two_floor", "revisit_map", "revisit"];

pub fn by_name(name: &str) -> Option<PipelineConfig> {
    match name {
        "staircase" => Some(staircase()),
        "two_floor" => Some(two_floor()),
        "revisit_map" => Some(revisit_map()),
        "revisit" => Some(revisit()),
        _ => None,
    }
}

/// Five-step flight (0.10 m risers, 0.30 m treads) with a landing, inside a
/// walled 6 x 4 m room with one low obstacle. The walk circles the room and
/// climbs the stairs.
pub fn staircase() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.scene = SceneSpec {
        rooms: vec![RoomSpec { polygon: rect(0.0, 0.0, 6.0, 4.0), class: "stairwell".into(), floor_z: 0.0 }],
        walls: rect_walls(0.0, 0.0, 6.0, 4.0, 1.0, 0.0, &[]),
        staircases: vec![StaircaseSpec {
            origin: [2.0, 2.0],
            yaw: 0.0,
            base_z: 0.0,
            riser: 0.10,
            tread: 0.30,
            steps: 5,
            width: 1.2,
        }],
        obstacles: vec![
            BoxSpec { min: [3.5, 1.4, 0.0], max: [4.7, 2.6, 0.5] },
            BoxSpec { min: [2.4, 3.4, 0.0], max: [2.8, 3.8, 0.3] },
        ],
    };
    cfg.trajectory.waypoints = vec![
        [0.7, 0.7, 0.0],
        [5.3, 0.7, 0.0],
        [5.3, 3.3, 0.0],
        [0.7, 3.3, 0.0],
        [0.7, 2.0, 0.0],
        [2.0, 2.0, 0.0],
        [3.5, 2.0, 0.5],
        [4.5, 2.0, 0.5],
    ];
    cfg.sensing.keyframes = false;
    cfg.drift = DriftConfig::zero();
    cfg
}

/// Two stacked floors joined by a twelve-step staircase. Office and kitchen
/// below, office and lab above, so the two offices share a footprint.
pub fn two_floor() -> PipelineConfig {
    let (h, top) = (2.3, 2.4);
    let (a, d) = (6.0, 5.0);
    let x2 = 2.0 * a;
    let (xs, xe) = (x2 + 0.5, x2 + 3.5);
    let xl = xe + 2.5;
    let door = (d / 2.0 - 0.5, d / 2.0 + 0.5);
    let wall = |from: [f64; 2], to: [f64; 2], height: f64, base_z: f64| WallSpec { from, to, height, thickness: 0.1, base_z };
    let mut walls = rect_walls(0.0, 0.0, xe, d, h, 0.0, &[]);
    walls.push(wall([a, 0.0], [a, door.0], h, 0.0));
    walls.push(wall([a, door.1], [a, d], h, 0.0));
    walls.push(wall([x2, 0.0], [x2, 1.5], h, 0.0));
    walls.push(wall([x2, 2.5], [x2, d], h, 0.0));
    // Upper floor: outer shell, two partitions and a railing along the stairwell.
    walls.extend(rect_walls(0.0, 0.0, xl, d, h, top, &[]));
    walls.push(wall([a, 0.0], [a, door.0], h, top));
    walls.push(wall([a, door.1], [a, d], h, top));
    walls.push(wall([x2, 0.0], [x2, 2.6], h, top));
    walls.push(wall([x2, 3.6], [x2, d], h, top));
    walls.push(wall([x2, 2.2], [xe, 2.2], 1.0, top));
    let mut cfg = PipelineConfig::default();
    cfg.scene = SceneSpec {
        rooms: vec![
            RoomSpec { polygon: rect(0.0, 0.0, a, d), class: "office".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(a, 0.0, x2, d), class: "kitchen".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(x2, 0.0, xe, 2.2), class: "stairwell".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(0.0, 0.0, a, d), class: "office".into(), floor_z: top },
            RoomSpec { polygon: rect(a, 0.0, x2, d), class: "lab".into(), floor_z: top },
            RoomSpec {
                polygon: vec![[x2, 2.2], [xe, 2.2], [xe, 0.0], [xl, 0.0], [xl, d], [x2, d]],
                class: "landing".into(),
                floor_z: top,
            },
        ],
        walls,
        staircases: vec![StaircaseSpec {
            origin: [xs, 0.8],
            yaw: 0.0,
            base_z: 0.0,
            riser: 0.2,
            tread: 0.25,
            steps: 12,
            width: 1.2,
        }],
        obstacles: vec![
            BoxSpec { min: [xe, 0.0, 0.0], max: [xl, d, top] },
            BoxSpec { min: [x2, 2.2, 0.0], max: [xe, d, top] },
        ],
    };
    let (lo, hi) = (0.0, top);
    let m = d / 2.0;
    cfg.trajectory.waypoints = vec![
        // Lower office, then kitchen.
        [1.0, 1.0, lo],
        [a - 1.0, 1.0, lo],
        [a - 1.0, d - 1.0, lo],
        [1.0, d - 1.0, lo],
        [1.0, m, lo],
        [a + 1.0, m, lo],
        [a + 1.0, 1.0, lo],
        [x2 - 1.0, 1.0, lo],
        [x2 - 1.0, d - 1.0, lo],
        [a + 1.0, d - 1.0, lo],
        [a + 1.0, 1.8, lo],
        // Through the stairwell door and up the flight.
        [x2 + 0.2, 1.8, lo],
        [x2 + 0.2, 0.8, lo],
        [xs, 0.8, lo],
        [xe, 0.8, hi],
        [xl - 1.0, 0.8, hi],
        [xl - 1.0, 3.1, hi],
        // Upper corridor, lab, then upper office.
        [x2 - 1.0, 3.1, hi],
        [x2 - 1.0, 1.0, hi],
        [a + 1.0, 1.0, hi],
        [a + 1.0, d - 1.0, hi],
        [x2 - 1.5, d - 1.0, hi],
        [x2 - 1.5, m, hi],
        [a - 1.0, m, hi],
        [a - 1.0, 1.0, hi],
        [1.0, 1.0, hi],
        [1.0, d - 1.0, hi],
        [a - 1.0, d - 1.0, hi],
    ];
    cfg.drift = DriftConfig::zero();
    cfg.sensing.keyframes = false;
    cfg.mapping.submap_side = 5.0;
    cfg
}

fn revisit_scene() -> SceneSpec {
    SceneSpec {
        rooms: vec![
            RoomSpec { polygon: rect(0.0, 0.0, 7.0, 5.0), class: "office".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(7.0, 0.0, 14.0, 5.0), class: "kitchen".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(7.0, 5.0, 14.0, 10.0), class: "lab".into(), floor_z: 0.0 },
            RoomSpec { polygon: rect(0.0, 5.0, 7.0, 10.0), class: "lounge".into(), floor_z: 0.0 },
        ],
        walls: rect_walls(0.0, 0.0, 14.0, 10.0, 2.3, 0.0, &[]),
        staircases: Vec::new(),
        obstacles: vec![BoxSpec { min: [3.0, 3.0, 0.0], max: [11.0, 7.0, 2.0] }],
    }
}

/// `laps` of the 36 m loop around the central block, then `extra` meters.
fn loop_waypoints(laps: usize, extra: f64) -> Vec<[f64; 3]> {
    let corners: [[f64; 2]; 4] = [[1.5, 1.5], [12.5, 1.5], [12.5, 8.5], [1.5, 8.5]];
    let mut out = vec![[1.5, 1.5, 0.0]];
    for _ in 0..laps {
        for c in corners.iter().cycle().skip(1).take(4) {
            out.push([c[0], c[1], 0.0]);
        }
    }
    let mut left = extra;
    for k in 0..4 {
        if left <= 0.0 {
            break;
        }
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let f = (left / len).min(1.0);
        out.push([a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, 0.0]);
        left -= len;
    }
    out
}

/// Drift-free mapping lap of the revisit loop that builds the keyframe map.
pub fn revisit_map() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.scene = revisit_scene();
    cfg.trajectory.waypoints = loop_waypoints(1, 2.0);
    cfg.drift = DriftConfig::zero();
    cfg.sensing.clouds = false;
    cfg.mapping.loop_closures = false;
    cfg
}

/// 80 m live run on the revisit loop with 4 % scale drift, relocalized
/// against the map built by `revisit_map`.
pub fn revisit() -> PipelineConfig {
    let mut cfg = revisit_map();
    cfg.seed = 1;
    cfg.trajectory.waypoints = loop_waypoints(2, 8.0);
    cfg.drift = DriftConfig { scale_drift: 0.04, ..DriftConfig::zero() };
    cfg.localization.prior_map = Some("../revisit_map".into());
    cfg
}
