pub mod micro_heads;
