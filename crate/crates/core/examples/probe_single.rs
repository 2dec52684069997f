use dsr_core::planner::*;
use dsr_core::sim::*;
use dsr_core::motion::SE3Transform;
use dsr_core::voxel::GridSpec;
use dsr_core::warp::AggregateConfig;

fn main() {
    let grid = GridSpec::benchmark();
    let sim = SimConfig::default();
    let agg = AggregateConfig::default();
    let camera = CameraConfig::default();
    let cfg = PlannerConfig::default();

    // Single cube at origin-ish; target = same cube shifted 0.10 m east.
    for seed in 0..10u64 {
        let x0 = -0.08 + (seed as f64) * 0.01;
        let scene = SceneState {
            objects: vec![RigidObject {
                id: 0,
                shape: Shape::Box { extents: [0.05, 0.05, 0.05] },
                pose: SE3Transform::planar(0.1 * seed as f64, [x0, -0.03, 0.025]),
            }],
            workspace_half: 0.256,
        };
        let mut target_scene = scene.clone();
        target_scene.objects[0].pose.translation[0] += 0.10;
        target_scene.objects[0].pose.translation[1] += 0.04;
        let target = TargetState { masks: gt_masks(&target_scene, &grid, 5).unwrap() };
        let init = dsr_core::metrics::unordered_iou(&target.masks, &gt_masks(&scene, &grid, 5).unwrap()).unwrap().0;
        let rep = execute_plan(&scene, &target, PredictorKind::Oracle, &cfg, &grid, &camera, &sim, &agg, true, seed).unwrap();
        println!("seed {seed}: init={init:.3} achieved={:.3} cost={:.3} actions={:?}",
            rep.achieved_iou, rep.predicted_cost,
            rep.executed.iter().map(|a| (a.px, a.py, a.d)).collect::<Vec<_>>());
    }
}
