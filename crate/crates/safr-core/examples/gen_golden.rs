use safr_core::model::{Model, ModelConfig};
use safr_core::repr_metrics::{self, LayerTag};
use safr_core::synth;
use safr_core::viz::{self, VizSpec};

fn main() {
    let raw = synth::generate(6, 9);
    let vocab = safr_core::data::build_vocab(&raw, 1);
    let mut cfg = ModelConfig::new(vocab.len(), 2, 16);
    cfg.embed_dim = 8;
    cfg.ff_dim = 16;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    cfg.seed = 5;
    let model = Model::init(cfg, vocab).unwrap();
    let ids = [2u32, 3, 4, 5];
    let tokens: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
    let trace = model.trace(&ids).unwrap();
    let cap = repr_metrics::capacity(trace.layer(LayerTag::Fc1)).unwrap();
    let cos = repr_metrics::cosine_matrix(trace.layer(LayerTag::Fc1)).unwrap();
    let spec = VizSpec::default();
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(
        dir.join("barchart.svg"),
        viz::barchart_svg(&tokens, cap.as_slice().unwrap(), "capacity fc1"),
    )
    .unwrap();
    std::fs::write(
        dir.join("heatmap.svg"),
        viz::heatmap_svg(&tokens, &cos, "interference fc1"),
    )
    .unwrap();
    std::fs::write(
        dir.join("token_graph.svg"),
        viz::token_graph_svg(&tokens, cap.as_slice().unwrap(), &cos, &spec, "graph fc1"),
    )
    .unwrap();
    println!("golden files written to {}", dir.display());
}
