//! Storage accounting: byte and MiB figures for the backbone, the
//! distillation baseline's classifier and exemplar buffer, and the
//! per-domain BN/adaption state, at 4 bytes per f32 value and
//! 1 MiB = 1,048,576 bytes.

use crate::backbone::{arch_plan, selected_conv_ordinals, ArchId, SaPlacement};
use crate::bank::Bank;
use crate::error::Result;

pub const MIB: f64 = 1_048_576.0;
pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, Copy)]
pub struct ExemplarPolicy {
    pub steps: u64,
    pub ids_per_step: u64,
    pub images_per_id: u64,
    pub height: u64,
    pub width: u64,
}

impl ExemplarPolicy {
    /// The rehearsal-baseline default: 250 identities x 2 images per step,
    /// stored as raw 8-bit pixels at the training input size.
    pub fn baseline_default(steps: u64) -> Self {
        ExemplarPolicy {
            steps,
            ids_per_step: 250,
            images_per_id: 2,
            height: 256,
            width: 128,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.steps * self.ids_per_step * self.images_per_id * self.height * self.width * 3
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierDims {
    pub classes: u64,
    pub feature_dim: u64,
}

impl ClassifierDims {
    pub fn values(&self) -> u64 {
        self.classes * self.feature_dim
    }
}

#[derive(Debug, Clone)]
pub struct StorageRow {
    pub component: String,
    /// f32 value count; 0 for byte-native rows such as exemplars.
    pub values: u64,
    pub bytes: u64,
    pub per_domain: bool,
    pub note: String,
}

impl StorageRow {
    pub fn mib(&self) -> f64 {
        self.bytes as f64 / MIB
    }
}

#[derive(Debug, Clone)]
pub struct StorageReport {
    pub arch: String,
    pub n_domains: u32,
    pub rows: Vec<StorageRow>,
}

impl StorageReport {
    pub fn row(&self, component: &str) -> Option<&StorageRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    fn per_domain_bytes(&self) -> u64 {
        self.row("bn_per_domain").map(|r| r.bytes).unwrap_or(0)
            + self.row("sa_per_domain").map(|r| r.bytes).unwrap_or(0)
    }

    /// Bank bytes after every domain: backbone once plus the per-domain state
    /// times the domain count.
    pub fn adaptive_total_bytes(&self) -> u64 {
        self.row("backbone").map(|r| r.bytes).unwrap_or(0)
            + self.n_domains as u64 * self.per_domain_bytes()
    }

    /// What the distillation baseline keeps around: backbone, cumulative
    /// classifier, and the exemplar buffer.
    pub fn distillation_total_bytes(&self) -> u64 {
        self.row("backbone").map(|r| r.bytes).unwrap_or(0)
            + self.row("classifier").map(|r| r.bytes).unwrap_or(0)
            + self.row("exemplars").map(|r| r.bytes).unwrap_or(0)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "storage report: arch={}, domains={}\n",
            self.arch, self.n_domains
        ));
        out.push_str(&format!(
            "{:<24} {:>14} {:>14} {:>10}  {}\n",
            "component", "values", "bytes", "MiB", "note"
        ));
        for r in &self.rows {
            let scope = if r.per_domain { " (per domain)" } else { "" };
            out.push_str(&format!(
                "{:<24} {:>14} {:>14} {:>10.3}  {}{}\n",
                r.component,
                r.values,
                r.bytes,
                r.mib(),
                r.note,
                scope
            ));
        }
        let a = self.adaptive_total_bytes();
        let d = self.distillation_total_bytes();
        out.push_str(&format!(
            "total, adaptive bank after {} domains: {} bytes ({:.3} MiB)\n",
            self.n_domains,
            a,
            a as f64 / MIB
        ));
        out.push_str(&format!(
            "total, distillation baseline:          {} bytes ({:.3} MiB)\n",
            d,
            d as f64 / MIB
        ));
        out
    }
}

/// Pure-enumeration report: no weights are materialized.
pub fn storage_report(
    arch: ArchId,
    sa_kernel_size: usize,
    sa_placement: Option<&SaPlacement>,
    n_domains: u32,
    classifier: ClassifierDims,
    exemplars: ExemplarPolicy,
) -> Result<StorageReport> {
    let plan = arch_plan(arch);
    let sa_values: u64 = match sa_placement {
        Some(placement) => selected_conv_ordinals(&plan, placement)?
            .iter()
            .map(|&o| (plan.convs[o].out_channels * sa_kernel_size * sa_kernel_size) as u64)
            .sum(),
        None => 0,
    };
    let bn_full = plan.bn_full_count_with_neck() as u64;
    let bn_affine_body = plan.bn_affine_count_body() as u64;
    Ok(build_report(
        arch.as_str(),
        n_domains,
        (plan.conv_param_count() + plan.bn_affine_count_body()) as u64,
        classifier,
        exemplars,
        bn_full,
        bn_affine_body,
        sa_values,
    ))
}

/// Report over an existing bank: per-domain rows reflect the actual
/// captured snapshots.
pub fn storage_report_for_bank(
    bank: &Bank,
    classifier: ClassifierDims,
    exemplars: ExemplarPolicy,
) -> Result<StorageReport> {
    let plan = arch_plan(bank.arch());
    let (bn_full, sa_values) = match bank.snapshots().first() {
        Some(snap) => (snap.bn_value_count(), snap.sa_value_count()),
        None => (plan.bn_full_count_with_neck() as u64, 0),
    };
    Ok(build_report(
        bank.arch().as_str(),
        bank.len() as u32,
        (plan.conv_param_count() + plan.bn_affine_count_body()) as u64,
        classifier,
        exemplars,
        bn_full,
        plan.bn_affine_count_body() as u64,
        sa_values,
    ))
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    arch: &str,
    n_domains: u32,
    backbone_values: u64,
    classifier: ClassifierDims,
    exemplars: ExemplarPolicy,
    bn_full_values: u64,
    bn_affine_body_values: u64,
    sa_values: u64,
) -> StorageReport {
    let rows = vec![
        StorageRow {
            component: "backbone".into(),
            values: backbone_values,
            bytes: backbone_values * BYTES_PER_VALUE,
            per_domain: false,
            note: "frozen conv kernels + body BN affine pairs, stored once".into(),
        },
        StorageRow {
            component: "classifier".into(),
            values: classifier.values(),
            bytes: classifier.values() * BYTES_PER_VALUE,
            per_domain: false,
            note: format!(
                "cumulative {} x {} head kept by distillation baselines",
                classifier.classes, classifier.feature_dim
            ),
        },
        StorageRow {
            component: "exemplars".into(),
            values: 0,
            bytes: exemplars.bytes(),
            per_domain: false,
            note: format!(
                "{} steps x {} ids x {} images, raw 8-bit {}x{}x3 pixels",
                exemplars.steps,
                exemplars.ids_per_step,
                exemplars.images_per_id,
                exemplars.height,
                exemplars.width
            ),
        },
        StorageRow {
            component: "bn_per_domain".into(),
            values: bn_full_values,
            bytes: bn_full_values * BYTES_PER_VALUE,
            per_domain: true,
            note: "mean, var, gamma, beta for every snapshotted layer incl. neck".into(),
        },
        StorageRow {
            component: "bn_affine_only".into(),
            values: bn_affine_body_values,
            bytes: bn_affine_body_values * BYTES_PER_VALUE,
            per_domain: true,
            note: "gamma, beta of body layers only; comparison convention".into(),
        },
        StorageRow {
            component: "sa_per_domain".into(),
            values: sa_values,
            bytes: sa_values * BYTES_PER_VALUE,
            per_domain: true,
            note: "depth-wise adaption kernels".into(),
        },
    ];
    StorageReport {
        arch: arch.to_string(),
        n_domains,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_report() -> StorageReport {
        storage_report(
            ArchId::Resnet50,
            5,
            Some(&SaPlacement::All),
            4,
            ClassifierDims {
                classes: 8_026,
                feature_dim: 2_048,
            },
            ExemplarPolicy::baseline_default(4),
        )
        .unwrap()
    }

    #[test]
    fn exemplar_bytes_exact() {
        let r = paper_report();
        let row = r.row("exemplars").unwrap();
        assert_eq!(row.bytes, 196_608_000);
        assert_eq!(row.mib(), 187.5);
    }

    #[test]
    fn sa_row_values() {
        let r = paper_report();
        let row = r.row("sa_per_domain").unwrap();
        assert_eq!(row.values, 664_000);
        assert!((row.mib() - 2.533).abs() / 2.533 < 0.001);
    }

    #[test]
    fn backbone_row() {
        let r = paper_report();
        let row = r.row("backbone").unwrap();
        assert_eq!(row.values, 23_508_032);
        assert!((row.mib() - 89.684).abs() / 89.684 < 0.005);
    }

    #[test]
    fn classifier_row() {
        let r = paper_report();
        let row = r.row("classifier").unwrap();
        assert!((row.mib() - 62.703).abs() / 62.703 < 0.001);
    }

    #[test]
    fn bn_affine_row() {
        let r = paper_report();
        let row = r.row("bn_affine_only").unwrap();
        assert_eq!(row.values, 53_120);
        assert!((row.mib() - 0.210).abs() / 0.210 < 0.05);
    }

    #[test]
    fn per_domain_cost_under_three_percent_in_comparison_convention() {
        let r = paper_report();
        let backbone = r.row("backbone").unwrap().bytes as f64;
        let per_domain = (r.row("bn_affine_only").unwrap().bytes
            + r.row("sa_per_domain").unwrap().bytes) as f64;
        assert!(per_domain / backbone < 0.031);
    }

    #[test]
    fn bank_growth_is_linear() {
        for t in 1..=6u32 {
            let r = storage_report(
                ArchId::Resnet50,
                5,
                Some(&SaPlacement::All),
                t,
                ClassifierDims {
                    classes: 1,
                    feature_dim: 1,
                },
                ExemplarPolicy::baseline_default(t as u64),
            )
            .unwrap();
            let backbone = r.row("backbone").unwrap().bytes;
            let per = r.row("bn_per_domain").unwrap().bytes + r.row("sa_per_domain").unwrap().bytes;
            assert_eq!(r.adaptive_total_bytes(), backbone + t as u64 * per);
        }
    }

    #[test]
    fn stage_restricted_placement() {
        use crate::backbone::Stage;
        let placement = SaPlacement::Stages([Stage::S2, Stage::S3, Stage::S4].into());
        let r = storage_report(
            ArchId::Resnet50,
            5,
            Some(&placement),
            1,
            ClassifierDims {
                classes: 1,
                feature_dim: 1,
            },
            ExemplarPolicy::baseline_default(1),
        )
        .unwrap();
        assert_eq!(r.row("sa_per_domain").unwrap().values, 627_200);
    }
}
