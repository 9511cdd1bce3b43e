use std::fmt;

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_COMPARISON: i32 = 3;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn comparison(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_COMPARISON,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<opo_noise::Error> for Failure {
    fn from(e: opo_noise::Error) -> Self {
        Self {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::validation(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use opo_noise::Error;

    #[test]
    fn exit_codes_follow_error_kind() {
        let numerical = Error::Divergence {
            trajectory: 0,
            step: 10,
            norm: 1e7,
        };
        assert_eq!(Failure::from(numerical).code, EXIT_NUMERICAL);
        assert_eq!(Failure::from(Error::NoConvergence(100)).code, EXIT_NUMERICAL);
        assert_eq!(Failure::from(Error::MissingKey("mode0.gamma".into())).code, EXIT_VALIDATION);
        assert_eq!(Failure::from(Error::BelowThreshold(0.5)).code, EXIT_VALIDATION);
        assert_eq!(Failure::comparison("x").code, EXIT_COMPARISON);
    }
}
