use super::ModelError;

/// Number of encoder stages (and of decoder levels, counting the bottleneck).
pub const STAGES: usize = 5;

/// Channel layout and feature switches of one U-Net.
///
/// This is the ablation surface: `enable_msfrb = false` gives the plain
/// skip-concat decoder, `enable_am = false` drops attention from the branch
/// road.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stage_channels: Vec<usize>,
    pub squeeze_k: usize,
    pub input_channels: usize,
    pub enable_msfrb: bool,
    pub enable_am: bool,
    pub conv_kernel: usize,
}

impl ChannelPlan {
    pub const DEFAULT_STAGES: [usize; STAGES] = [16, 32, 64, 128, 256];

    pub fn generator_default() -> Self {
        Self {
            stage_channels: Self::DEFAULT_STAGES.to_vec(),
            squeeze_k: 4,
            input_channels: 3,
            enable_msfrb: true,
            enable_am: true,
            conv_kernel: 3,
        }
    }

    /// Fundus image plus vessel map in, no MSFRB, no attention.
    pub fn discriminator_default() -> Self {
        Self {
            input_channels: 4,
            enable_msfrb: false,
            enable_am: false,
            ..Self::generator_default()
        }
    }

    pub fn with_stages(mut self, stages: &[usize]) -> Self {
        self.stage_channels = stages.to_vec();
        self
    }

    /// `C_s` for 1-based stage index `s`.
    pub fn channels(&self, stage: usize) -> usize {
        self.stage_channels[stage - 1]
    }

    /// Checks every structural constraint and reports all that fail.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut failed = Vec::new();
        let c = &self.stage_channels;
        if c.len() != STAGES {
            failed.push(format!("expected {STAGES} stage channel counts, got {}", c.len()));
        }
        if c.contains(&0) {
            failed.push("stage channel counts must be positive".to_string());
        }
        if c.windows(2).any(|w| w[0] >= w[1]) {
            failed.push(format!("stage channels {c:?} must be strictly increasing"));
        }
        if self.squeeze_k == 0 {
            failed.push("squeeze_k must be positive".to_string());
        } else if let Some(bad) = c.iter().find(|&&ch| ch % self.squeeze_k != 0) {
            failed.push(format!(
                "stage channels {bad} not divisible by squeeze_k = {}",
                self.squeeze_k
            ));
        } else if self.enable_msfrb && c.len() == STAGES {
            for s in 2..=STAGES {
                let branch = 2 * c[s - 1] / self.squeeze_k;
                if branch != c[s - 2] {
                    failed.push(format!(
                        "stage {s}: branch width 2*{}/{} = {branch} differs from main width {}",
                        c[s - 1],
                        self.squeeze_k,
                        c[s - 2]
                    ));
                }
            }
        }
        if self.input_channels == 0 {
            failed.push("input_channels must be positive".to_string());
        }
        if self.conv_kernel.is_multiple_of(2) {
            failed.push(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.enable_am && !self.enable_msfrb {
            failed.push("attention lives in the MSFRB branch road and needs enable_msfrb".to_string());
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(failed.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ChannelPlan::generator_default().validate().unwrap();
        ChannelPlan::discriminator_default().validate().unwrap();
    }

    #[test]
    fn squeeze_factor_four_is_forced_under_doubling() {
        for k in [1, 2, 8, 16] {
            let plan = ChannelPlan {
                squeeze_k: k,
                ..ChannelPlan::generator_default()
            };
            assert!(plan.validate().is_err(), "k = {k}");
        }
        // without MSFRB the branch constraint does not apply
        let plain = ChannelPlan {
            squeeze_k: 2,
            enable_msfrb: false,
            enable_am: false,
            ..ChannelPlan::generator_default()
        };
        plain.validate().unwrap();
    }

    #[test]
    fn failures_are_listed() {
        let plan = ChannelPlan {
            stage_channels: vec![32, 16, 64, 128, 250],
            enable_msfrb: false,
            ..ChannelPlan::generator_default()
        };
        let msg = plan.validate().unwrap_err().to_string();
        assert!(msg.contains("strictly increasing"), "{msg}");
        assert!(msg.contains("divisible"), "{msg}");
        assert!(msg.contains("enable_msfrb"), "{msg}");
    }

    #[test]
    fn stage_count_is_fixed() {
        let plan = ChannelPlan::generator_default().with_stages(&[8, 16, 32, 64]);
        assert!(plan.validate().is_err());
    }
}
