use dsr_core::planner::*;
use dsr_core::sim::*;
use dsr_core::voxel::GridSpec;
use dsr_core::warp::{aggregate, perceive, AggregateConfig, AggregationMode};
use rand::SeedableRng;

fn main() {
    let grid = GridSpec::benchmark();
    let sim = SimConfig::default();
    let agg = AggregateConfig::default();
    let camera = CameraConfig::default();

    // Find the over-segmentation failure at 4 objects.
    'outer: for seed in 0..20u64 {
        let scene = drop_objects(seed, 4, ShapeFamily::Mixed, &sim).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let mut s = scene.clone();
        let mut pstate = PolicyState::new(&s);
        for push in 0..4 {
            pstate.observe(&s);
            let a = interaction_policy(&s, &mut pstate, &mut rng, &grid, &sim);
            s = step_push(&s, &a, &grid, &sim).unwrap().scene;
            let cam = CameraModel::new(&camera);
            let obs = fuse_tsdf(&render_depth(&s, &cam), &cam, &grid, sim.tau_voxels);
            let p = perceive(&obs, &agg.perceive);
            if p.segments.len() > 4 {
                println!("seed {seed} push {push}: {} segments, sizes {:?}", p.segments.len(),
                    p.segments.iter().map(|x| x.voxels.len()).collect::<Vec<_>>());
                let r = aggregate(None, None, &obs, AggregationMode::SingleStep, &agg);
                println!("  aggregate: {:?}", r.err().map(|e| e.to_string()));
                break 'outer;
            }
        }
    }

    // Margin vs lambda.
    for lambda in [1.0f64, 50.0, 200.0] {
        let cfg = PlannerConfig { lambda: vec![lambda; 4], ..PlannerConfig::default() };
        let mut planned = 0.0;
        let mut random = 0.0;
        let mut init = 0.0;
        let n = 10u64;
        for seed in 0..n {
            let scene = drop_objects(seed, 3, ShapeFamily::Mixed, &sim).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let mut s = scene.clone();
            let mut pstate = PolicyState::new(&s);
            for _ in 0..4 {
                pstate.observe(&s);
                let a = interaction_policy(&s, &mut pstate, &mut rng, &grid, &sim);
                s = step_push(&s, &a, &grid, &sim).unwrap().scene;
            }
            let target = TargetState { masks: gt_masks(&s, &grid, 5).unwrap() };
            let init_iou = dsr_core::metrics::unordered_iou(&target.masks, &gt_masks(&scene, &grid, 5).unwrap()).unwrap().0;
            let rep = execute_plan(&scene, &target, PredictorKind::Oracle, &cfg, &grid, &camera, &sim, &agg, true, seed).unwrap();
            let base = random_baseline(&scene, &target, cfg.horizon, &grid, &sim, seed).unwrap();
            planned += rep.achieved_iou;
            random += base.achieved_iou;
            init += init_iou;
        }
        println!(
            "lambda={lambda}: planned={:.3} random={:.3} init={:.3} margin={:.3}",
            planned / n as f64, random / n as f64, init / n as f64,
            (planned - random) / n as f64
        );
    }
}
