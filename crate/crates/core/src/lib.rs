pub mod qstate;
pub mod photonics;
pub mod bellcert;
pub mod architectures;
pub mod keyproto;
