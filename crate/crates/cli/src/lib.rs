//! Toolkit around the estimation core: file formats and subcommand
//! drivers. The `refpose` binary is a thin argument-parsing layer over
//! [`run`].

pub mod io;
pub mod run;
