//! Process exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::fmt;

use banet_core::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

/// A bad flag, config key or option value.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A NaN, infinity or failed numerical check.
#[derive(Debug)]
pub struct Numeric(pub String);

impl fmt::Display for Numeric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

/// Exit code of the first classifiable error in the chain.
pub fn code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return USAGE;
        }
        if cause.is::<Numeric>() {
            return NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite(_) => NUMERIC,
                Error::InvalidArgument { .. } => USAGE,
                _ => DATA,
            };
        }
    }
    DATA
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification_sees_through_context() {
        let nan: anyhow::Result<()> = Err(Error::NonFinite("tail.weight".into())).context("training");
        assert_eq!(code(&nan.unwrap_err()), NUMERIC);
        let bad = anyhow::Error::new(Usage("no".into())).context("parsing");
        assert_eq!(code(&bad), USAGE);
        assert_eq!(code(&anyhow::Error::new(Error::Dataset("x".into()))), DATA);
        assert_eq!(code(&anyhow::anyhow!("disk on fire")), DATA);
    }
}
