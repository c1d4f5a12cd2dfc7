//! Flat cosine index, top-k search, Recall@k evaluation and embedding
//! diagnostics.

mod eval;
mod index;
mod io;
mod pca;
mod sweep;

pub use eval::{evaluate, evaluate_with_index, EvalMeta, EvalReport, EvalRow, KSettings, REPORT_HEADER};
pub use index::{
    build_index, dataset_code, dataset_tag_of, embed_normalized, l2_normalize, modality_separation,
    recall_at_k, search_topk, EmbeddingIndex, ScopeFilter, Separation,
};
pub use io::{decode_index, encode_index, load_index, save_index, INDEX_MAGIC};
pub use pca::{pca_2d, write_pca_csv};
pub use sweep::{lambda_sweep, SweepPoint};
