// mdbook renders the chapters under book/ but cannot run their code
// fences as tests. This crate closes that gap: each chapter is included
// verbatim as the documentation of an empty module, so `cargo test`
// compiles and runs every ```rust block in the book via rustdoc. One
// module per chapter keeps test failures attributable to a file.
//
// Hidden lines (leading `# `) work in both renderers: rustdoc strips
// them when displaying, mdbook hides them behind the eye toggle, and
// both compile them — which is how the snippets stay honest about
// error handling without drowning the page in boilerplate.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/dictionary-features.md")]
pub mod dictionary_features {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
