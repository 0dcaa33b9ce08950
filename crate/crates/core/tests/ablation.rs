use mcmri::config::TrainConfig;
use mcmri::data::Dataset;
use mcmri::trainer::run_ablation_nblocks;

#[test]
fn second_block_does_not_degrade_over_three_seeds() {
    let base = TrainConfig {
        height: 32,
        width: 32,
        contrasts: 3,
        n_samples: 20,
        train_frac: 0.6,
        val_frac: 0.0,
        preselect: 4,
        depth: 3,
        channels: vec![8, 16, 32],
        epochs: 10,
        batch_size: 1,
        learning_rate: 2e-3,
        ..TrainConfig::default()
    };
    let data = Dataset::generate(&base.phantom_config(), base.n_samples, 0, base.train_frac, base.val_frac).unwrap();
    let (mut one, mut two) = (0.0, 0.0);
    for seed in 0..3 {
        let cfg = TrainConfig { seed, ..base.clone() };
        let rows = run_ablation_nblocks(&cfg, "", &data, &[1, 2], None).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_blocks).collect::<Vec<_>>(), [1, 2]);
        one += rows[0].mean_psnr / 3.0;
        two += rows[1].mean_psnr / 3.0;
    }
    println!("mean PSNR: one block {one:.3} dB, two blocks {two:.3} dB");
    assert!(two >= one - 0.2, "{two} < {one} - 0.2");
}
