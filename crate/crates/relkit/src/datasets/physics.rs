//! Balls on a unit table connected by invisible springs or rigid rods.
//! The integrator is semi-implicit Euler with per-substep distance
//! projection for rigid pairs and elastic wall reflection; trajectories
//! are recorded as `[n_balls, 2·n_frames + 1]` matrices the models
//! consume (x positions, then y positions, then one color scalar per
//! ball).

use rand::Rng;

use crate::datasets::{scene_rng, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default ball count.
pub const N_BALLS: usize = 10;
/// Default recorded frame count (frame 0 is the initial state).
pub const N_FRAMES: usize = 16;
/// Integration substeps between recorded frames.
pub const SUBSTEPS: usize = 5;
/// Substep length in seconds.
pub const DT: f64 = 0.02;
/// Hooke constant for spring edges.
pub const SPRING_K: f64 = 30.0;
/// Initial speed range (direction uniform on the circle).
pub const SPEED_RANGE: (f64, f64) = (0.1, 0.5);
/// Connection count is uniform on 0..=MAX_EDGES.
pub const MAX_EDGES: usize = 5;
/// Rigid pairs are projected until the worst violation is below this.
pub const RIGID_TOL: f64 = 1e-10;
/// Iteration cap for the projection loop.
const PROJECT_CAP: usize = 500;
/// Features per ball row at the default frame count.
pub const BALL_FEATURES: usize = 2 * N_FRAMES + 1;

/// Features per ball row: x positions, y positions, color scalar.
pub fn ball_features(n_frames: usize) -> usize {
    2 * n_frames + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Spring,
    Rigid,
}

impl EdgeKind {
    pub fn code(self) -> u8 {
        match self {
            EdgeKind::Spring => 1,
            EdgeKind::Rigid => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(EdgeKind::Spring),
            2 => Ok(EdgeKind::Rigid),
            _ => Err(Error::Config(format!("unknown edge kind code {code}"))),
        }
    }
}

/// A connection between balls `a < b`; `rest` is the separation at
/// spawn time, which both connection types try to maintain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
    pub rest: f64,
}

/// Spawn-time ball state.
#[derive(Debug, Clone, PartialEq)]
pub struct BallInit {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

/// One simulated scene: recorded trajectory, the connection graph, and
/// its connected-component count.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsScene {
    pub n_balls: usize,
    pub n_frames: usize,
    /// Row-major `[n_balls, 2·n_frames + 1]`.
    pub trajectory: Vec<f64>,
    /// Row-major `[n_balls, n_balls]`, entries 0/1.
    pub adjacency: Vec<u8>,
    pub edges: Vec<PhysicsEdge>,
    pub system_count: usize,
}

impl PhysicsScene {
    pub fn features_per_ball(&self) -> usize {
        ball_features(self.n_frames)
    }

    pub fn trajectory_matrix<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_raw(
            vec![self.n_balls, self.features_per_ball()],
            self.trajectory.iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    /// Recorded position of one ball at one frame.
    pub fn position(&self, ball: usize, frame: usize) -> (f64, f64) {
        let row = ball * self.features_per_ball();
        (
            self.trajectory[row + frame],
            self.trajectory[row + self.n_frames + frame],
        )
    }

    pub fn adj(&self, a: usize, b: usize) -> u8 {
        self.adjacency[a * self.n_balls + b]
    }
}

/// Integrate the system and return per-frame positions; frame 0 is the
/// initial configuration, and each later frame follows `substeps`
/// semi-implicit Euler steps of length `dt`.
pub fn integrate(
    init: &BallInit,
    edges: &[PhysicsEdge],
    dt: f64,
    substeps: usize,
    frames: usize,
) -> Vec<Vec<[f64; 2]>> {
    let mut pos = init.pos.clone();
    let mut vel = init.vel.clone();
    let mut recorded = Vec::with_capacity(frames);
    recorded.push(pos.clone());
    for _ in 1..frames {
        for _ in 0..substeps {
            step(&mut pos, &mut vel, edges, dt);
        }
        recorded.push(pos.clone());
    }
    recorded
}

fn step(pos: &mut [[f64; 2]], vel: &mut [[f64; 2]], edges: &[PhysicsEdge], dt: f64) {
    let n = pos.len();
    // Spring forces on current positions (unit masses).
    let mut force = vec![[0.0f64; 2]; n];
    for e in edges {
        if e.kind != EdgeKind::Spring {
            continue;
        }
        let dx = pos[e.a][0] - pos[e.b][0];
        let dy = pos[e.a][1] - pos[e.b][1];
        let len = (dx * dx + dy * dy).sqrt().max(1e-12);
        let f = -SPRING_K * (len - e.rest) / len;
        force[e.a][0] += f * dx;
        force[e.a][1] += f * dy;
        force[e.b][0] -= f * dx;
        force[e.b][1] -= f * dy;
    }
    for i in 0..n {
        vel[i][0] += force[i][0] * dt;
        vel[i][1] += force[i][1] * dt;
    }

    let before = pos.to_vec();
    for i in 0..n {
        pos[i][0] += vel[i][0] * dt;
        pos[i][1] += vel[i][1] * dt;
    }

    // Elastic wall reflection: mirror the position, flip the velocity.
    for i in 0..n {
        for axis in 0..2 {
            if pos[i][axis] < 0.0 {
                pos[i][axis] = -pos[i][axis];
                vel[i][axis] = -vel[i][axis];
            } else if pos[i][axis] > 1.0 {
                pos[i][axis] = 2.0 - pos[i][axis];
                vel[i][axis] = -vel[i][axis];
            }
        }
    }

    // Project rigid pairs back to their rest distance, splitting the
    // correction equally, until the worst violation is negligible.
    let rigid: Vec<&PhysicsEdge> = edges.iter().filter(|e| e.kind == EdgeKind::Rigid).collect();
    if !rigid.is_empty() {
        for _ in 0..PROJECT_CAP {
            let mut worst = 0.0f64;
            for e in &rigid {
                let dx = pos[e.a][0] - pos[e.b][0];
                let dy = pos[e.a][1] - pos[e.b][1];
                let len = (dx * dx + dy * dy).sqrt().max(1e-12);
                let err = len - e.rest;
                worst = worst.max(err.abs());
                let half = 0.5 * err / len;
                pos[e.a][0] -= half * dx;
                pos[e.a][1] -= half * dy;
                pos[e.b][0] += half * dx;
                pos[e.b][1] += half * dy;
            }
            // Keep projected balls on the table; the next sweep restores
            // any distance the clamp disturbed.
            for e in &rigid {
                for &i in &[e.a, e.b] {
                    for axis in 0..2 {
                        pos[i][axis] = pos[i][axis].clamp(0.0, 1.0);
                    }
                }
            }
            if worst < RIGID_TOL {
                break;
            }
        }
        // Velocities of rigid-connected balls follow the corrected
        // positions so the constraint stays satisfied next step.
        let mut constrained = vec![false; n];
        for e in &rigid {
            constrained[e.a] = true;
            constrained[e.b] = true;
        }
        for i in 0..n {
            if constrained[i] {
                vel[i][0] = (pos[i][0] - before[i][0]) / dt;
                vel[i][1] = (pos[i][1] - before[i][1]) / dt;
            }
        }
    }
}

/// Sample one scene: positions uniform in [0.1, 0.9]², speeds uniform
/// in [`SPEED_RANGE`] with uniform heading, connection count uniform
/// in 0..=[`MAX_EDGES`], distinct edges, each spring or rigid with
/// probability ½.
pub fn simulate_physics(rng: &mut impl Rng, n_balls: usize, n_frames: usize) -> PhysicsScene {
    assert!((2..=255).contains(&n_balls), "ball count {n_balls} out of range");
    assert!(n_frames >= 1, "need at least one frame");
    let mut init = BallInit {
        pos: vec![[0.0; 2]; n_balls],
        vel: vec![[0.0; 2]; n_balls],
    };
    for i in 0..n_balls {
        init.pos[i][0] = rng.gen_range(0.1..0.9);
        init.pos[i][1] = rng.gen_range(0.1..0.9);
    }
    for i in 0..n_balls {
        let speed = rng.gen_range(SPEED_RANGE.0..SPEED_RANGE.1);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        init.vel[i][0] = speed * angle.cos();
        init.vel[i][1] = speed * angle.sin();
    }

    let n_edges = rng.gen_range(0..=MAX_EDGES.min(n_balls * (n_balls - 1) / 2));
    // Partial Fisher–Yates over the unordered pairs.
    let mut pair_ids: Vec<usize> = (0..n_balls * (n_balls - 1) / 2).collect();
    let mut edges = Vec::with_capacity(n_edges);
    for slot in 0..n_edges {
        let pick = rng.gen_range(slot..pair_ids.len());
        pair_ids.swap(slot, pick);
        let (a, b) = unrank_pair(pair_ids[slot], n_balls);
        let kind = if rng.gen_bool(0.5) {
            EdgeKind::Spring
        } else {
            EdgeKind::Rigid
        };
        let dx = init.pos[a][0] - init.pos[b][0];
        let dy = init.pos[a][1] - init.pos[b][1];
        edges.push(PhysicsEdge {
            a,
            b,
            kind,
            rest: (dx * dx + dy * dy).sqrt(),
        });
    }

    let frames = integrate(&init, &edges, DT, SUBSTEPS, n_frames);

    let mut adjacency = vec![0u8; n_balls * n_balls];
    for e in &edges {
        adjacency[e.a * n_balls + e.b] = 1;
        adjacency[e.b * n_balls + e.a] = 1;
    }
    let system_count = count_systems(&adjacency, n_balls);

    let features = ball_features(n_frames);
    let mut trajectory = vec![0.0f64; n_balls * features];
    for ball in 0..n_balls {
        let row = ball * features;
        for (f, frame) in frames.iter().enumerate() {
            trajectory[row + f] = frame[ball][0];
            trajectory[row + n_frames + f] = frame[ball][1];
        }
        trajectory[row + 2 * n_frames] = ball as f64 / (n_balls - 1) as f64;
    }

    PhysicsScene {
        n_balls,
        n_frames,
        trajectory,
        adjacency,
        edges,
        system_count,
    }
}

/// Map a rank below C(n, 2) to the unordered pair (a, b), a < b, in
/// lexicographic order: (0,1), (0,2), …, (n−2,n−1).
fn unrank_pair(mut rank: usize, n: usize) -> (usize, usize) {
    for a in 0..n {
        let row = n - 1 - a;
        if rank < row {
            return (a, a + 1 + rank);
        }
        rank -= row;
    }
    unreachable!("rank below C(n, 2)")
}

/// Connected components of a row-major `[n, n]` adjacency matrix by
/// breadth-first search.
pub fn count_systems(adjacency: &[u8], n: usize) -> usize {
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(i) = queue.pop() {
            for j in 0..n {
                if adjacency[i * n + j] == 1 && !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
    }
    components
}

/// Supervised targets derivable from a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhysicsTask {
    /// n² binary entries: the row-major flattened adjacency matrix.
    InferConnections,
    /// One-hot of length n at `system_count − 1`.
    CountSystems,
}

impl PhysicsTask {
    pub fn code(self) -> u8 {
        match self {
            PhysicsTask::InferConnections => 1,
            PhysicsTask::CountSystems => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(PhysicsTask::InferConnections),
            2 => Ok(PhysicsTask::CountSystems),
            _ => Err(Error::Config(format!("unknown physics task code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhysicsTask::InferConnections => "connections",
            PhysicsTask::CountSystems => "count",
        }
    }
}

impl std::str::FromStr for PhysicsTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connections" | "infer-connections" => Ok(PhysicsTask::InferConnections),
            "count" | "count-systems" => Ok(PhysicsTask::CountSystems),
            _ => Err(Error::Config(format!(
                "unknown physics task {s:?} (expected connections or count)"
            ))),
        }
    }
}

pub fn physics_targets(scene: &PhysicsScene, task: PhysicsTask) -> Vec<f64> {
    match task {
        PhysicsTask::InferConnections => scene.adjacency.iter().map(|&v| v as f64).collect(),
        PhysicsTask::CountSystems => {
            let mut out = vec![0.0; scene.n_balls];
            out[scene.system_count - 1] = 1.0;
            out
        }
    }
}

/// A generated physics corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsDataset {
    pub seed: u64,
    pub split: Split,
    pub n_balls: usize,
    pub n_frames: usize,
    pub records: Vec<PhysicsScene>,
}

/// Generate `count` scenes, each from its own (seed, split, index)
/// substream, so any sharding over workers yields the same corpus.
pub fn gen_physics_dataset(
    seed: u64,
    split: Split,
    count: usize,
    n_balls: usize,
    n_frames: usize,
) -> PhysicsDataset {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = scene_rng(seed, split, i as u64);
        records.push(simulate_physics(&mut rng, n_balls, n_frames));
    }
    PhysicsDataset {
        seed,
        split,
        n_balls,
        n_frames,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent component oracle: union-find with path compression.
    fn union_find_components(adjacency: &[u8], n: usize) -> usize {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for a in 0..n {
            for b in 0..n {
                if adjacency[a * n + b] == 1 {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra] = rb;
                    }
                }
            }
        }
        (0..n)
            .map(|i| find(&mut parent, i))
            .collect::<std::collections::HashSet<_>>()
            .len()
    }

    fn free_scene(seed: u64) -> PhysicsScene {
        // Re-draw until the connection count comes up zero.
        for i in 0..1000 {
            let mut rng = scene_rng(seed, Split::Train, i);
            let scene = simulate_physics(&mut rng, N_BALLS, N_FRAMES);
            if scene.edges.is_empty() {
                return scene;
            }
        }
        panic!("no free scene in 1000 draws");
    }

    #[test]
    fn free_scene_has_ten_systems_and_straight_segments() {
        let scene = free_scene(1);
        assert_eq!(scene.system_count, 10);
        assert!(scene.adjacency.iter().all(|&v| v == 0));
        // Between consecutive frames with no wall bounce, displacement is
        // constant: check the second difference of each coordinate is ~0
        // wherever the ball stays strictly inside the table.
        for ball in 0..N_BALLS {
            for f in 1..N_FRAMES - 1 {
                let (x0, y0) = scene.position(ball, f - 1);
                let (x1, y1) = scene.position(ball, f);
                let (x2, y2) = scene.position(ball, f + 1);
                let margin = 0.06; // one frame of travel at max speed
                let interior = [x0, x1, x2, y0, y1, y2]
                    .iter()
                    .all(|&v| v > margin && v < 1.0 - margin);
                if interior {
                    assert!(((x2 - x1) - (x1 - x0)).abs() < 1e-9);
                    assert!(((y2 - y1) - (y1 - y0)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rigid_pair_distance_is_constant() {
        let mut found = 0;
        for i in 0..200u64 {
            let mut rng = scene_rng(2, Split::Train, i);
            let scene = simulate_physics(&mut rng, N_BALLS, N_FRAMES);
            for e in scene.edges.iter().filter(|e| e.kind == EdgeKind::Rigid) {
                found += 1;
                for f in 0..N_FRAMES {
                    let (ax, ay) = scene.position(e.a, f);
                    let (bx, by) = scene.position(e.b, f);
                    let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                    assert!(
                        (d - e.rest).abs() <= 1e-6,
                        "frame {f}: distance {d} vs rest {}",
                        e.rest
                    );
                }
            }
        }
        assert!(found > 20, "rigid sample too small: {found}");
    }

    #[test]
    fn spring_pair_tracks_fine_step_reference() {
        // Two balls joined by one spring, everything else far away and
        // motionless; compare dt against dt/100.
        let mut init = BallInit {
            pos: vec![[0.5; 2]; N_BALLS],
            vel: vec![[0.0; 2]; N_BALLS],
        };
        init.pos[0] = [0.50, 0.5];
        init.pos[1] = [0.635, 0.5];
        init.vel[0] = [0.02, 0.05];
        init.vel[1] = [-0.02, -0.05];
        for i in 2..N_BALLS {
            init.pos[i] = [0.05 + 0.09 * i as f64, 0.05];
        }
        let edges = [PhysicsEdge {
            a: 0,
            b: 1,
            kind: EdgeKind::Spring,
            rest: 0.12,
        }];
        let coarse = integrate(&init, &edges, DT, SUBSTEPS, N_FRAMES);
        let fine = integrate(&init, &edges, DT / 100.0, SUBSTEPS * 100, N_FRAMES);
        let pair_distance = |frame: &Vec<[f64; 2]>| {
            let dx = frame[0][0] - frame[1][0];
            let dy = frame[0][1] - frame[1][1];
            (dx * dx + dy * dy).sqrt()
        };
        let mut stretched = false;
        let mut compressed = false;
        for f in 0..N_FRAMES {
            for ball in [0, 1] {
                for axis in 0..2 {
                    let dev = (coarse[f][ball][axis] - fine[f][ball][axis]).abs();
                    assert!(dev <= 0.02, "frame {f}: coarse/fine deviation {dev}");
                }
            }
            let (dc, df) = (pair_distance(&coarse[f]), pair_distance(&fine[f]));
            assert!(
                (dc - df).abs() / df <= 0.02,
                "frame {f}: pair distance {dc} vs fine reference {df}"
            );
            stretched |= dc > 0.12;
            compressed |= dc < 0.12;
        }
        assert!(stretched && compressed, "no oscillation about rest length");
    }

    #[test]
    fn adjacency_invariants_on_large_corpus() {
        let mut max_speed = 0.0f64;
        for i in 0..10_000u64 {
            let mut rng = scene_rng(3, Split::Train, i);
            let scene = simulate_physics(&mut rng, N_BALLS, N_FRAMES);
            for a in 0..N_BALLS {
                assert_eq!(scene.adj(a, a), 0);
                for b in 0..N_BALLS {
                    assert_eq!(scene.adj(a, b), scene.adj(b, a));
                }
            }
            assert_eq!(
                scene.system_count,
                union_find_components(&scene.adjacency, N_BALLS)
            );
            assert!((5..=10).contains(&scene.system_count));
            for &v in &scene.trajectory {
                assert!(v.is_finite());
            }
            for ball in 0..N_BALLS {
                for f in 0..N_FRAMES {
                    let (x, y) = scene.position(ball, f);
                    assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
                    if f > 0 {
                        let (px, py) = scene.position(ball, f - 1);
                        let frame_dt = DT * SUBSTEPS as f64;
                        let v = ((x - px).powi(2) + (y - py).powi(2)).sqrt() / frame_dt;
                        max_speed = max_speed.max(v);
                    }
                }
            }
        }
        // Bounded kinetic energy: recorded speeds never blow up. Springs
        // trade energy back and forth; a loose factor over the fastest
        // initial speed plus spring head-room catches divergence.
        assert!(max_speed < 5.0, "max observed speed {max_speed}");
    }

    #[test]
    fn six_ball_scenes_have_matching_shapes() {
        for i in 0..200u64 {
            let mut rng = scene_rng(8, Split::Train, i);
            let scene = simulate_physics(&mut rng, 6, N_FRAMES);
            assert_eq!(scene.n_balls, 6);
            assert_eq!(scene.trajectory.len(), 6 * 33);
            assert_eq!(scene.adjacency.len(), 36);
            assert!((1..=6).contains(&scene.system_count));
            assert_eq!(
                scene.system_count,
                union_find_components(&scene.adjacency, 6)
            );
            let flat = physics_targets(&scene, PhysicsTask::InferConnections);
            assert_eq!(flat.len(), 36);
            let count = physics_targets(&scene, PhysicsTask::CountSystems);
            assert_eq!(count.len(), 6);
            // Color scalar spreads over [0, 1] in steps of 1/5.
            for ball in 0..6 {
                let color = scene.trajectory[ball * 33 + 32];
                assert!((color - ball as f64 / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn targets_for_tiny_graph() {
        let mut scene = free_scene(4);
        scene.adjacency = vec![0; N_BALLS * N_BALLS];
        for (a, b) in [(0, 1), (1, 2)] {
            scene.adjacency[a * N_BALLS + b] = 1;
            scene.adjacency[b * N_BALLS + a] = 1;
        }
        scene.system_count = count_systems(&scene.adjacency, N_BALLS);
        assert_eq!(scene.system_count, 8);
        let flat = physics_targets(&scene, PhysicsTask::InferConnections);
        let ones: Vec<usize> = flat
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![1, 10, 12, 21]);
        let count = physics_targets(&scene, PhysicsTask::CountSystems);
        assert_eq!(count[7], 1.0);
        assert_eq!(count.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn empty_graph_targets() {
        let scene = free_scene(5);
        let flat = physics_targets(&scene, PhysicsTask::InferConnections);
        assert!(flat.iter().all(|&v| v == 0.0));
        let count = physics_targets(&scene, PhysicsTask::CountSystems);
        assert_eq!(count[9], 1.0);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = gen_physics_dataset(6, Split::Train, 30, N_BALLS, N_FRAMES);
        let b = gen_physics_dataset(6, Split::Train, 30, N_BALLS, N_FRAMES);
        assert_eq!(a, b);
        assert_ne!(a, gen_physics_dataset(7, Split::Train, 30, N_BALLS, N_FRAMES));
    }

    #[test]
    fn sharded_generation_matches_sequential() {
        // Two simulated workers, each generating its own index range,
        // must reproduce the sequential corpus exactly.
        let full = gen_physics_dataset(11, Split::Test, 10, 6, N_FRAMES);
        let mut sharded = Vec::new();
        for range in [0..5u64, 5..10u64] {
            for i in range {
                let mut rng = scene_rng(11, Split::Test, i);
                sharded.push(simulate_physics(&mut rng, 6, N_FRAMES));
            }
        }
        assert_eq!(full.records, sharded);
    }

    #[test]
    fn pair_unranking_is_lexicographic() {
        assert_eq!(unrank_pair(0, N_BALLS), (0, 1));
        assert_eq!(unrank_pair(8, N_BALLS), (0, 9));
        assert_eq!(unrank_pair(9, N_BALLS), (1, 2));
        assert_eq!(unrank_pair(44, N_BALLS), (8, 9));
        for n in [2, 6, 10] {
            let mut seen = std::collections::HashSet::new();
            for r in 0..n * (n - 1) / 2 {
                let (a, b) = unrank_pair(r, n);
                assert!(a < b && b < n);
                assert!(seen.insert((a, b)));
            }
        }
    }
}
