use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, ModelState, ParamKind, ParamSpec, ParamState};
use crate::error::{Result, UcpError};
use crate::tensor::gen_tensor;

/// Largest tensor-parallel degree the generated shapes are guaranteed to split evenly under.
pub const MAX_TP_DEGREE: usize = 8;

pub const DEFAULT_LOSS_SCALE: f64 = 65536.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    DenseGPT,
    MoE,
    GQA,
}

impl std::str::FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dense" | "densegpt" | "gpt" => Ok(ModelFamily::DenseGPT),
            "moe" => Ok(ModelFamily::MoE),
            "gqa" => Ok(ModelFamily::GQA),
            other => Err(format!("unknown model family `{other}` (dense, moe, gqa)")),
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelFamily::DenseGPT => "dense",
            ModelFamily::MoE => "moe",
            ModelFamily::GQA => "gqa",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelScale {
    pub n_layers: u32,
    pub hidden: usize,
    #[serde(default)]
    pub n_experts: Option<usize>,
    #[serde(default)]
    pub q_heads: Option<usize>,
    #[serde(default)]
    pub kv_heads: Option<usize>,
    /// MLP / expert output width; defaults to `4 * hidden`.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    /// Defaults to `4 * hidden`.
    #[serde(default)]
    pub vocab: Option<usize>,
}

impl ModelScale {
    pub fn new(n_layers: u32, hidden: usize) -> Self {
        ModelScale {
            n_layers,
            hidden,
            n_experts: None,
            q_heads: None,
            kv_heads: None,
            ffn_hidden: None,
            vocab: None,
        }
    }
}

fn param(
    name: String,
    shape: Vec<usize>,
    layer_index: u32,
    kind: ParamKind,
    tp_axis_hint: Option<u32>,
    nc_segments: Option<Vec<(usize, usize)>>,
) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        layer_index,
        kind,
        tp_axis_hint,
        nc_segments,
    }
}

pub fn make_model(family: ModelFamily, scale: &ModelScale) -> Result<ModelSpec> {
    let quantum = 2 * MAX_TP_DEGREE;
    let h = scale.hidden;
    let ffn = scale.ffn_hidden.unwrap_or(4 * h);
    let vocab = scale.vocab.unwrap_or(4 * h);
    let q_heads = scale.q_heads.unwrap_or(8);
    let invalid = |msg: String| Err(UcpError::InvalidSpec(msg));

    if h == 0 || h % quantum != 0 {
        return invalid(format!("hidden {h} must be a positive multiple of {quantum}"));
    }
    if ffn == 0 || ffn % quantum != 0 {
        return invalid(format!("ffn_hidden {ffn} must be a positive multiple of {quantum}"));
    }
    if vocab == 0 || vocab % quantum != 0 {
        return invalid(format!("vocab {vocab} must be a positive multiple of {quantum}"));
    }
    if q_heads == 0 {
        return invalid("q_heads must be positive".into());
    }

    let mut params = Vec::new();
    let n = scale.n_layers;
    params.push(param("embed.weight".into(), vec![vocab, h], 0, ParamKind::Embedding, Some(0), None));
    if n > 0 {
        params.push(param("pos.alibi".into(), vec![q_heads], 0, ParamKind::AsyncPartial, None, None));
    }

    let qkv = match family {
        ModelFamily::GQA => {
            let kv_heads = scale.kv_heads.unwrap_or(q_heads);
            if kv_heads == 0 || q_heads % kv_heads != 0 {
                return invalid(format!("q_heads {q_heads} must be a multiple of kv_heads {kv_heads}"));
            }
            if (h * kv_heads) % q_heads != 0 {
                return invalid(format!("hidden {h} not divisible into {q_heads} heads"));
            }
            let kv_size = h * kv_heads / q_heads;
            if kv_size % MAX_TP_DEGREE != 0 {
                return invalid(format!("k/v size {kv_size} must be a multiple of {MAX_TP_DEGREE}"));
            }
            Some(kv_size)
        }
        _ => None,
    };
    let n_experts = match family {
        ModelFamily::MoE => {
            let e = scale.n_experts.unwrap_or(4);
            if e == 0 {
                return invalid("n_experts must be positive".into());
            }
            Some(e)
        }
        _ => None,
    };

    for i in 0..n {
        let p = |leaf: &str| format!("layers.{i}.{leaf}");
        params.push(param(p("ln1.weight"), vec![h], i, ParamKind::LayerNormWeight, None, None));
        params.push(param(p("ln1.bias"), vec![h], i, ParamKind::LayerNormBias, None, None));
        match qkv {
            Some(kv) => params.push(param(
                p("attn.qkv"),
                vec![h + 2 * kv, h],
                i,
                ParamKind::FusedQKV,
                Some(0),
                Some(vec![(0, h), (h, kv), (h + kv, kv)]),
            )),
            None => params.push(param(p("attn.qkv"), vec![3 * h, h], i, ParamKind::Matmul2D, Some(0), None)),
        }
        params.push(param(p("attn.out"), vec![h, h], i, ParamKind::Matmul2D, Some(1), None));
        params.push(param(p("ln2.weight"), vec![h], i, ParamKind::LayerNormWeight, None, None));
        params.push(param(p("ln2.bias"), vec![h], i, ParamKind::LayerNormBias, None, None));
        match n_experts {
            Some(e) => params.push(param(
                p("moe.experts"),
                vec![e * ffn, h],
                i,
                ParamKind::FusedExpert3DLike,
                Some(0),
                Some((0..e).map(|j| (j * ffn, ffn)).collect()),
            )),
            None => {
                params.push(param(p("mlp.fc1"), vec![ffn, h], i, ParamKind::Matmul2D, Some(0), None));
                params.push(param(p("mlp.fc2"), vec![h, ffn], i, ParamKind::Matmul2D, Some(1), None));
            }
        }
    }

    params.push(param(
        "head.weight".into(),
        vec![vocab, h],
        n.saturating_sub(1),
        ParamKind::TiedEmbedding,
        Some(0),
        None,
    ));

    let spec = ModelSpec {
        name: format!("{family}-l{n}-h{h}"),
        n_layers: n,
        tied_pairs: vec![("embed.weight".into(), "head.weight".into())],
        params,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn init_state(spec: &ModelSpec, seed: u64) -> ModelState {
    let mut params = BTreeMap::new();
    for p in &spec.params {
        let root = spec.tied_root(&p.name);
        if root != p.name {
            continue;
        }
        let mut adam_v = gen_tensor(seed, &p.name, "v", &p.shape);
        for x in adam_v.as_f32_mut().unwrap() {
            *x = x.abs();
        }
        let st = ParamState {
            weight: gen_tensor(seed, &p.name, "weight", &p.shape),
            adam_m: gen_tensor(seed, &p.name, "m", &p.shape),
            adam_v,
        };
        params.insert(p.name.clone(), st);
    }
    for (a, b) in &spec.tied_pairs {
        let copy = params[a].clone();
        params.insert(b.clone(), copy);
    }
    let metadata = [
        ("iteration".to_string(), 0.0),
        ("loss_scale".to_string(), DEFAULT_LOSS_SCALE),
    ]
    .into_iter()
    .collect();
    ModelState {
        params,
        step: 0,
        metadata,
    }
}
