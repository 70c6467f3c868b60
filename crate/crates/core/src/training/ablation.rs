use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::finetune::{run_finetuning, summarize, FinetuneConfig, NerData};
use crate::error::{Error, Result};
use crate::model::{BiasMode, ModelConfig, ParameterStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub label: String,
    pub use_abs_2d: bool,
    pub bias_mode: BiasMode,
}

impl AblationVariant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_abs_2d: self.use_abs_2d,
            bias_mode: self.bias_mode,
            ..base.clone()
        }
    }
}

/// With and without absolute 2D embeddings, both with the base bias mode;
/// `bias_sweep` adds one column per bias mode without absolute 2D embeddings.
pub fn ablation_variants(base: &ModelConfig, bias_sweep: bool) -> Vec<AblationVariant> {
    let mut v = alloc::vec![
        AblationVariant {
            label: "w 2D-Pos".into(),
            use_abs_2d: true,
            bias_mode: base.bias_mode,
        },
        AblationVariant {
            label: "w/o 2D-Pos".into(),
            use_abs_2d: false,
            bias_mode: base.bias_mode,
        },
    ];
    if bias_sweep {
        v.extend(BiasMode::ALL.into_iter().map(|m| AblationVariant {
            label: format!("bias={m}"),
            use_abs_2d: false,
            bias_mode: m,
        }));
    }
    v
}

/// One fine-tuning run of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationJob {
    pub dataset: usize,
    pub variant: usize,
    pub seed: u64,
}

pub fn ablation_jobs(n_datasets: usize, n_variants: usize, seeds: &[u64]) -> Vec<AblationJob> {
    let mut jobs = Vec::new();
    for dataset in 0..n_datasets {
        for variant in 0..n_variants {
            for &seed in seeds {
                jobs.push(AblationJob { dataset, variant, seed });
            }
        }
    }
    jobs
}

pub fn run_ablation_job(
    job: &AblationJob,
    datasets: &[(String, NerData)],
    variants: &[AblationVariant],
    base: &ModelConfig,
    run: &FinetuneConfig,
    pretrained: Option<&ParameterStore>,
) -> Result<f64> {
    let cfg = variants[job.variant].apply(base);
    let r = FinetuneConfig {
        seed: job.seed,
        ..run.clone()
    };
    Ok(run_finetuning(&datasets[job.dataset].1, &cfg, &r, pretrained, &mut ())?.report.f1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Mean F1 per variant, in [0, 1].
    pub cells: Vec<f64>,
}

/// F1 comparison with one row per dataset and a final `Avg` row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Pipe-separated text with F1 in percent, two decimals.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(core::iter::once("Dataset".len()))
            .max()
            .unwrap_or(7);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(10)).collect();
        let mut out = format!("| {:<width$} |", "Dataset");
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(&format!(" {c:>w$} |"));
        }
        out.push('\n');
        out.push_str(&format!("|{}|", "-".repeat(width + 2)));
        for w in &widths {
            out.push_str(&format!("{}|", "-".repeat(w + 2)));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {:<width$} |", r.name));
            for (v, w) in r.cells.iter().zip(&widths) {
                out.push_str(&format!(" {:>w$.2} |", 100.0 * v));
            }
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.name == row).map(|r| r.cells[c])
    }
}

/// Averages `results[k]` (the F1 of `jobs[k]`) over seeds.
pub fn assemble_table(
    dataset_names: &[String],
    variants: &[AblationVariant],
    jobs: &[AblationJob],
    results: &[f64],
) -> Result<AblationTable> {
    if jobs.len() != results.len() {
        return Err(Error::LengthMismatch(format!(
            "{} ablation results for {} jobs",
            results.len(),
            jobs.len()
        )));
    }
    let mut rows: Vec<AblationRow> = dataset_names
        .iter()
        .enumerate()
        .map(|(d, name)| {
            let cells = (0..variants.len())
                .map(|v| {
                    let scores: Vec<f64> = jobs
                        .iter()
                        .zip(results)
                        .filter(|(j, _)| j.dataset == d && j.variant == v)
                        .map(|(_, &f)| f)
                        .collect();
                    summarize(&scores).mean
                })
                .collect();
            AblationRow {
                name: name.clone(),
                cells,
            }
        })
        .collect();
    let avg = (0..variants.len())
        .map(|v| rows.iter().map(|r| r.cells[v]).sum::<f64>() / rows.len().max(1) as f64)
        .collect();
    rows.push(AblationRow {
        name: "Avg".to_string(),
        cells: avg,
    });
    Ok(AblationTable {
        columns: variants.iter().map(|v| v.label.clone()).collect(),
        rows,
    })
}

/// Runs the whole grid sequentially.
pub fn run_ablation(
    datasets: &[(String, NerData)],
    base: &ModelConfig,
    run: &FinetuneConfig,
    pretrained: Option<&ParameterStore>,
    seeds: &[u64],
    bias_sweep: bool,
) -> Result<AblationTable> {
    let variants = ablation_variants(base, bias_sweep);
    let jobs = ablation_jobs(datasets.len(), variants.len(), seeds);
    let results = jobs
        .iter()
        .map(|j| run_ablation_job(j, datasets, &variants, base, run, pretrained))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = datasets.iter().map(|(n, _)| n.clone()).collect();
    assemble_table(&names, &variants, &jobs, &results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_aligns_wide_labels() {
        let t = AblationTable {
            columns: alloc::vec!["w 2D-Pos".into(), "bias=cartesian".into()],
            rows: alloc::vec![
                AblationRow {
                    name: "tables".into(),
                    cells: alloc::vec![0.5, 1.0],
                },
                AblationRow {
                    name: "Avg".into(),
                    cells: alloc::vec![0.5, 1.0],
                },
            ],
        };
        let text = t.render();
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{text}");
        assert!(text.contains("100.00 |"));
    }
}
