use smudge_core::data::generate_blobs;
use smudge_core::denoiser::{
    eval_eps_loss, train_denoiser, TinyAttentionDenoiser, TinyDenoiserConfig, TrainConfig,
};
use smudge_core::prompt::{
    eval_prompt_loss, train_prompt_encoder, ImageTokenizer, PromptTrainConfig, QFormerConfig,
    QFormerEncoder,
};
use smudge_core::schedule::NoiseSchedule;

fn main() {
    let schedule = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
    let data = generate_blobs(512, 32, 0);
    let (train, held) = data.split_holdout(8);
    let mut model = TinyAttentionDenoiser::new(TinyDenoiserConfig::default(), 0).unwrap();
    train_denoiser(
        &mut model,
        &train,
        &schedule,
        &TrainConfig {
            steps: 3000,
            ..Default::default()
        },
    )
    .unwrap();
    let text_only = eval_eps_loss(&model, &held, &schedule, 4, 99).unwrap();
    let text_only_train = eval_eps_loss(&model, &train, &schedule, 1, 98).unwrap();
    println!("text-only: held {text_only:.4} train {text_only_train:.4}");

    for (steps, lr, gamma) in [(8000usize, 1e-2, 0.5), (8000, 3e-2, 0.5), (8000, 1e-2, 1.0)] {
        let tokenizer = ImageTokenizer::new(32, 8, 16, 0).unwrap();
        let mut encoder = QFormerEncoder::new(
            QFormerConfig {
                queries: 8,
                width: 16,
                submodules: 2,
                ff_mult: 2,
            },
            0,
        )
        .unwrap();
        let curve = train_prompt_encoder(
            &mut encoder,
            &tokenizer,
            &model,
            &train,
            &schedule,
            &PromptTrainConfig {
                steps,
                lr,
                gamma,
                ..Default::default()
            },
        )
        .unwrap();
        let with_prompt =
            eval_prompt_loss(&encoder, &tokenizer, &model, &held, &schedule, gamma, 4, 99).unwrap();
        let with_prompt_train = eval_prompt_loss(
            &encoder, &tokenizer, &model, &train, &schedule, gamma, 1, 98,
        )
        .unwrap();
        println!(
            "steps={steps} lr={lr} gamma={gamma}: held {with_prompt:.4} (gain {:+.4}) train {with_prompt_train:.4} (gain {:+.4}) curve tail {:.4}",
            text_only - with_prompt, text_only_train - with_prompt_train,
            curve[curve.len()-200..].iter().sum::<f64>()/200.0
        );
    }
}
