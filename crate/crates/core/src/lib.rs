pub mod cribnet;
pub mod error;
pub mod evalcli;
pub mod hsidata;
pub mod inferpipe;
pub mod io;
pub mod losses;
pub mod numcore;
pub mod theorylab;
pub mod trainpipe;

pub use error::{Error, Result};
