//! The narrative guide, kept honest by the compiler.
//!
//! The book chapters live in `book/src/`. Including them here turns every
//! fenced Rust block in the book into a doc-test, so `cargo test` fails
//! whenever the guide drifts from the API.
#![cfg(doctest)]

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $path))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(configuration, "configuration.md");
chapter!(audio, "audio.md");
chapter!(spectrograms, "spectrograms.md");
chapter!(pcen, "pcen.md");
chapter!(datasets, "datasets.md");
chapter!(augmentation, "augmentation.md");
chapter!(autodiff, "autodiff.md");
chapter!(training, "training.md");
chapter!(inference, "inference.md");
chapter!(sweeps, "sweeps.md");
