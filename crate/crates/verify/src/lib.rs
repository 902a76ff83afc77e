//! Holds the `acceptance` test target. Run it with
//! `cargo test -p prunekit-verify --test acceptance`.
