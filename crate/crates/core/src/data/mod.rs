//! Session storage, loading and synthetic data.

pub mod datf;
pub mod session;
pub mod synth;

pub use datf::{decode_matrix, encode_matrix, read_matrix, write_matrix};
pub use session::{
    load_session, load_sessions, partner_aggregate, save_session, session_dirs, Role, RoleData,
    SessionManifest, SessionRecord,
};
pub use synth::{synth_range, synth_session, synth_sessions, SynthConfig};
