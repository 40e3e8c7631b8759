//! Dataset ingestion and training streams.

pub mod corpus;
pub mod idx;
pub mod stream;

pub use corpus::{build_char_corpus, build_word_corpus, Level, TokenCorpus};
pub use idx::{load_idx_images, load_split, split_paths, write_idx_pair, ImageExample, Split, TaskId, IMAGE_DIM, TASK_FASHION, TASK_MNIST};
pub use stream::{make_stream, Batch, ExampleRef, ImageSets, Phase, Schedule, TrainingStream};
