use grounded::config::Config;
use grounded::train::Trainer;

#[test]
fn loss_at_step_500_is_below_step_0() {
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut c = Config::default();
        c.seed = seed;
        let mut trainer = Trainer::new(&c).unwrap();
        let first = trainer.step().unwrap().loss;
        let mut last = first;
        while trainer.steps_done() <= 500 {
            last = trainer.step().unwrap().loss;
        }
        drops.push(last - first);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] < 0.0, "{drops:?}");
}
