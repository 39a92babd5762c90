//! Layout-guided generation: user boxes become per-subject signed masks
//! that are added to subject-token attention logits with a concave
//! time-dependent intensity, steering each subject into its box and out of
//! the other subjects' boxes.

use crate::autodiff::softmax_rows_value;
use crate::diffusion::denoiser::AttnContext;
use crate::diffusion::sampler::{sample_traced, SamplerConfig, StepEditor, StepTrace};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::DenoiserParams;
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::registry::{compose_embedding, Binding};
use crate::tensor::{matmul_nn, Tensor};
use crate::text::Vocabulary;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// User layout: subject bounding boxes in normalized coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Layout {
    /// (H, W) of the latent canvas this layout was designed for.
    pub canvas: [usize; 2],
    pub boxes: Vec<LayoutBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayoutBox {
    pub subject: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl Layout {
    pub fn from_json(text: &str) -> Result<Layout> {
        let l: Layout = serde_json::from_str(text)?;
        l.validate()?;
        Ok(l)
    }

    pub fn load(path: &Path) -> Result<Layout> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            let [x0, y0, x1, y1] = b.bbox;
            let in_range = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_range(x0) && in_range(y0) && in_range(x1) && in_range(y1)) {
                return Err(Error::Validation(format!(
                    "box {:?} for {:?} outside [0,1]",
                    b.bbox, b.subject
                )));
            }
            if x0 >= x1 || y0 >= y1 {
                return Err(Error::Validation(format!(
                    "box {:?} for {:?} must satisfy x0 < x1 and y0 < y1",
                    b.bbox, b.subject
                )));
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.boxes.iter().map(|b| b.subject.clone()).collect()
    }

    pub fn boxes_of(&self, subject: &str) -> Vec<[f64; 4]> {
        self.boxes
            .iter()
            .filter(|b| b.subject == subject)
            .map(|b| b.bbox)
            .collect()
    }
}

/// One rasterized mask grid, row-major, cells in {gamma+, gamma-, 0}.
#[derive(Debug, Clone)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<f64>,
}

/// Signed guidance masks for one subject at every attention resolution.
#[derive(Debug, Clone)]
pub struct GuidanceMask {
    pub subject: String,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub grids: Vec<MaskGrid>,
}

fn center_in(bbox: &[f64; 4], cx: f64, cy: f64) -> bool {
    cx >= bbox[0] && cx < bbox[2] && cy >= bbox[1] && cy < bbox[3]
}

/// Rasterizes per-subject signed masks at each attention resolution using
/// the cell-center rule. Cells inside the subject's own boxes get
/// `gamma_plus`, cells inside other subjects' boxes get `gamma_minus`,
/// everything else 0; a subject's own region always wins over another
/// subject's overlap.
pub fn rasterize_masks(
    layout: &Layout,
    subjects: &[String],
    resolutions: &[(usize, usize)],
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<Vec<GuidanceMask>> {
    if gamma_plus < 0.0 {
        return Err(Error::Validation(format!("gamma+ must be >= 0, got {gamma_plus}")));
    }
    if gamma_minus > 0.0 {
        return Err(Error::Validation(format!("gamma- must be <= 0, got {gamma_minus}")));
    }
    if !layout.boxes.is_empty() {
        for s in subjects {
            if layout.boxes_of(s).is_empty() {
                return Err(Error::Validation(format!("subject {s:?} has no box in the layout")));
            }
        }
    }
    // degenerate-box check at the coarsest resolution
    if let Some(&(ch, cw)) = resolutions.iter().min_by_key(|(h, w)| h * w) {
        for b in &layout.boxes {
            let mut covered = 0usize;
            for i in 0..ch {
                for j in 0..cw {
                    if center_in(&b.bbox, (j as f64 + 0.5) / cw as f64, (i as f64 + 0.5) / ch as f64)
                    {
                        covered += 1;
                    }
                }
            }
            if covered == 0 {
                return Err(Error::DegenerateBox { subject: b.subject.clone(), h: ch, w: cw });
            }
        }
    }

    let mut out = Vec::with_capacity(subjects.len());
    for s in subjects {
        let own = layout.boxes_of(s);
        let others: Vec<[f64; 4]> = layout
            .boxes
            .iter()
            .filter(|b| &b.subject != s)
            .map(|b| b.bbox)
            .collect();
        let mut grids = Vec::with_capacity(resolutions.len());
        for &(h, w) in resolutions {
            let mut cells = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f64 + 0.5) / w as f64;
                    let cy = (i as f64 + 0.5) / h as f64;
                    let in_show = own.iter().any(|b| center_in(b, cx, cy));
                    let in_irrelevant = !in_show && others.iter().any(|b| center_in(b, cx, cy));
                    cells[i * w + j] = if in_show {
                        gamma_plus
                    } else if in_irrelevant {
                        gamma_minus
                    } else {
                        0.0
                    };
                }
            }
            grids.push(MaskGrid { h, w, cells });
        }
        out.push(GuidanceMask {
            subject: s.clone(),
            gamma_plus,
            gamma_minus,
            grids,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaForm {
    Sqrt,
    Linear,
    SineQuarter,
}

/// Concave edit-intensity ramp: zero at t = 0, `peak` at t = t_total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub form: EtaForm,
    pub peak: f64,
    pub t_total: usize,
}

pub fn eta(t: usize, s: &GuidanceSchedule) -> f64 {
    let f = (t as f64 / s.t_total.max(1) as f64).clamp(0.0, 1.0);
    let base = match s.form {
        EtaForm::Sqrt => f.sqrt(),
        EtaForm::Linear => f,
        EtaForm::SineQuarter => (std::f64::consts::FRAC_PI_2 * f).sin(),
    };
    s.peak * base
}

/// Adds eta * mask to the subject-token columns of one head's logits.
pub fn edit_logits(logits: &Tensor, masks: &[(&MaskGrid, &[usize])], eta_t: f64) -> Tensor {
    let mut out = logits.clone();
    let l = out.cols();
    for (grid, positions) in masks {
        assert_eq!(grid.h * grid.w, out.rows(), "mask does not match layer resolution");
        for q in 0..grid.cells.len() {
            let add = eta_t * grid.cells[q];
            let row = out.row_mut(q);
            for &p in *positions {
                assert!(p < l, "token position {p} out of range");
                row[p] += add;
            }
        }
    }
    out
}

/// The full edited cross-attention of one head:
/// softmax(logits + eta(t) * masks) * values.
pub fn edited_cross_attention(
    logits: &Tensor,
    masks: &[(&MaskGrid, &[usize])],
    t: usize,
    schedule: &GuidanceSchedule,
    values: &Tensor,
) -> Tensor {
    let edited = edit_logits(logits, masks, eta(t, schedule));
    let weights = softmax_rows_value(&edited);
    matmul_nn(&weights, values)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub eta_form: EtaForm,
    pub eta_peak: f64,
    /// Sampler steps (from the start) that receive the edit.
    pub guide_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma_plus: 2.5,
            gamma_minus: -1e-5,
            eta_form: EtaForm::Sqrt,
            eta_peak: 1.0,
            guide_steps: 50,
        }
    }
}

/// Step editor wiring masks into the sampler.
struct LayoutEditor {
    /// (mask, token positions) per subject; grids indexed by layer.
    masks: Vec<(GuidanceMask, Vec<usize>)>,
    schedule: GuidanceSchedule,
    guide_steps: usize,
}

impl StepEditor for LayoutEditor {
    fn edit(&self, step: usize, ctx: &AttnContext, logits: &Tensor) -> Tensor {
        if step >= self.guide_steps {
            return logits.clone();
        }
        let eta_t = eta(ctx.timestep, &self.schedule);
        let pairs: Vec<(&MaskGrid, &[usize])> = self
            .masks
            .iter()
            .map(|(m, pos)| (&m.grids[ctx.layer], pos.as_slice()))
            .collect();
        edit_logits(logits, &pairs, eta_t)
    }
}

/// End-to-end multi-subject generation: composes bound residuals into the
/// prompt embedding, rasterizes layout masks once per resolution and runs
/// the deterministic sampler with the attention editor installed at every
/// step and layer. Without a layout, sampling is composition-only.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    dn: &DenoiserParams,
    enc: &EncoderParams,
    vocab: &Vocabulary,
    prompt_text: &str,
    bindings: &[Binding],
    layout: Option<&Layout>,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    collect: bool,
) -> Result<(LatentImage, Vec<StepTrace>)> {
    let prompt = vocab.tokenize(prompt_text)?;
    let base = encode(enc, &prompt);
    let uncond_prompt = vocab.tokenize("")?;
    let emb_uncond = encode(enc, &uncond_prompt);
    let emb_final = compose_embedding(&base, &prompt, bindings, vocab)?;

    let editor: Option<LayoutEditor> = match layout {
        None => None,
        Some(layout) => {
            layout.validate()?;
            if layout.canvas != [dn.cfg.image_size, dn.cfg.image_size] {
                return Err(Error::Validation(format!(
                    "layout canvas {:?} does not match the {}x{} latent",
                    layout.canvas, dn.cfg.image_size, dn.cfg.image_size
                )));
            }
            let bound: BTreeSet<String> =
                bindings.iter().map(|b| b.entry.subject.clone()).collect();
            let in_layout = layout.subjects();
            if bound != in_layout {
                return Err(Error::Validation(format!(
                    "bindings {bound:?} and layout subjects {in_layout:?} must reference the same set"
                )));
            }
            if bindings.is_empty() {
                None
            } else {
                let subjects: Vec<String> =
                    bindings.iter().map(|b| b.entry.subject.clone()).collect();
                let resolutions: Vec<(usize, usize)> =
                    dn.attention_resolutions().into_iter().map(|(_, r)| r).collect();
                let masks = rasterize_masks(
                    layout,
                    &subjects,
                    &resolutions,
                    gcfg.gamma_plus,
                    gcfg.gamma_minus,
                )?;
                let with_positions = bindings
                    .iter()
                    .zip(masks)
                    .map(|(b, m)| Ok((m, b.positions(&prompt, vocab)?)))
                    .collect::<Result<Vec<_>>>()?;
                Some(LayoutEditor {
                    masks: with_positions,
                    schedule: GuidanceSchedule {
                        form: gcfg.eta_form,
                        peak: gcfg.eta_peak,
                        t_total: schedule.t_max(),
                    },
                    guide_steps: gcfg.guide_steps,
                })
            }
        }
    };
    sample_traced(
        dn,
        &emb_final,
        &emb_uncond,
        schedule,
        scfg,
        seed,
        editor.as_ref().map(|e| e as &dyn StepEditor),
        collect,
    )
}
