//! Server-side WiFi fingerprint localization from RTLS feeds, with a seeded
//! WLAN simulator and an evaluation harness.

pub mod feed;
pub mod fingerprint;
pub mod localizer;
pub mod pipeline;
pub mod evaluate;
pub mod service;
pub mod sim;
