pub use pvlir_core as core;
