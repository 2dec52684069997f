use dsr_core::planner::*;
use dsr_core::sim::*;
use dsr_core::voxel::GridSpec;
use dsr_core::warp::*;
use dsr_core::motion::blended_flow;
use std::time::Instant;

fn main() {
    let grid = GridSpec::benchmark();
    let sim = SimConfig::default();
    let agg = AggregateConfig::default();
    let camera = CameraConfig::default();
    let scene = drop_objects(1, 2, ShapeFamily::Mixed, &sim).unwrap();
    let state = observe_scene(&scene, &grid, &camera, &sim, &agg).unwrap();
    let predictor = OraclePredictor::new(&scene, &state, grid, sim).unwrap();

    let a = PushAction { px: 40, py: 64, d: 0 };

    let t0 = Instant::now();
    for _ in 0..20 { let _ = predictor.predict(&state, &a).unwrap(); }
    println!("predict: {:?}/call", t0.elapsed() / 20);

    let p = predictor.predict(&state, &a).unwrap();
    let masks = p.masks_or(&state);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = blended_flow(masks, &p.transforms).unwrap(); }
    println!("blended_flow: {:?}/call", t0.elapsed() / 20);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = predict_step(&state, masks, &p.transforms).unwrap(); }
    println!("predict_step: {:?}/call", t0.elapsed() / 20);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = sample_actions(&state, &PlannerConfig::default(), &grid, 1).unwrap(); }
    println!("sample_actions(100): {:?}/call", t0.elapsed() / 20);

    let t0 = Instant::now();
    let s2 = predict_step(&state, masks, &p.transforms).unwrap();
    println!("one predict_step: {:?}", t0.elapsed());

    let t0 = Instant::now();
    for _ in 0..20 { let _ = state.masks.harden(); }
    println!("harden: {:?}/call", t0.elapsed() / 20);

    let target = TargetState { masks: gt_masks(&scene, &grid, 5).unwrap() };
    let t0 = Instant::now();
    for _ in 0..20 { let _ = rollout_cost(&s2.masks, &target.masks, &PlannerConfig::default()).unwrap(); }
    println!("rollout_cost: {:?}/call", t0.elapsed() / 20);

    let t0 = Instant::now();
    let _ = plan(&state, &target, &predictor, &PlannerConfig::default(), &grid, 0).unwrap();
    println!("full plan (100x3): {:?}", t0.elapsed());
}
