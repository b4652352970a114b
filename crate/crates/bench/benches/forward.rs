use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use maps_bench::synthetic_fixture;
use maps_core::align_personal::{EncoderConfig, TransformerEncoder};
use maps_core::autograd::Tape;
use maps_core::evaluator::{rank_of, ModelScorer, SessionScorer};
use maps_core::moae::{Moae, MoaeConfig};
use maps_core::params::ParamStore;
use maps_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn pooling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamStore::new();
    let moae = Moae::new(&mut params, 32, MoaeConfig::default(), &mut rng).unwrap();
    let mut group = c.benchmark_group("moae_pool_text");
    for len in [4, 16, 64] {
        let h = random_mat(&mut rng, len, 32);
        let q = random_mat(&mut rng, 1, 32);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let hv = tape.input(h.clone());
                let qv = tape.input(q.clone());
                black_box(moae.pool_text(&mut tape, &params, hv, Some(qv)).unwrap());
            })
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    let cfg = EncoderConfig { layers: 1, heads: 2, positional: false, max_positions: 31 };
    let enc = TransformerEncoder::new(&mut params, "bench", 64, cfg, &mut rng).unwrap();
    let x = random_mat(&mut rng, 31, 64);
    c.bench_function("encoder_forward_31x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            black_box(enc.encode(&mut tape, &params, xv, None).unwrap());
        })
    });
}

fn scoring(c: &mut Criterion) {
    let (data, model) = synthetic_fixture(3);
    let inputs = model.inputs(&data.corpus, &data.store).unwrap();
    let scorer = ModelScorer::new(&model, &inputs);
    let session = data.corpus.sessions().len() - 1;
    c.bench_function("score_all_items_one_session", |b| b.iter(|| black_box(scorer.score_all(session).unwrap())));
    let mut f = model.forward(&inputs);
    let batch: Vec<(usize, Vec<usize>)> = (0..8).map(|s| (s, (1..11).map(|v| (s + v) % 120).collect())).collect();
    let loss = f.pa_loss(&batch).unwrap();
    c.bench_function("pa_backward_8_sessions", |b| b.iter(|| black_box(f.tape.backward(loss))));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let ids: Vec<String> = (0..1000).map(|i| format!("item{i:04}")).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    c.bench_function("rank_of_1000", |b| b.iter(|| black_box(rank_of(&scores, &id_refs, 500))));
}

criterion_group!(benches, pooling, encoder, scoring, metrics);
criterion_main!(benches);
