//! Binary checkpoints.
//!
//! Layout: the magic "HALRP01", the canonical config text, the recorded
//! input shape, per-mode model sections (explicit shape tables, 32-bit
//! little-endian floats), and a trailing 64-bit FNV-1a checksum over
//! everything before it. Loading verifies magic, version and checksum, and
//! rebuilds the networks from the embedded config's architecture.

use std::path::Path;

use crate::cl_engine::{ContinualState, ExperimentConfig, Mode, ModelState};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::linalg::{LowRankFactors, Matrix, Tensor4};
use crate::nn::{Head, LayerWeights, Network, Shape};
use crate::perturb::{TaskLayerParams, TaskPrivateParams};

use super::config::{parse_config, resolve_arch, RunConfig};

const MAGIC: &[u8] = b"HALRP01";

// ---------------------------------------------------------------------------
// Byte-level writer / reader
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len());
        self.buf.extend_from_slice(v);
    }
    fn f32s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()?;
        self.take(len)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

fn write_shape(w: &mut Writer, shape: Shape) {
    match shape {
        Shape::Flat(n) => {
            w.u8(0);
            w.u32(n);
        }
        Shape::Image {
            channels,
            height,
            width,
        } => {
            w.u8(1);
            w.u32(channels);
            w.u32(height);
            w.u32(width);
        }
    }
}

fn read_shape(r: &mut Reader) -> Result<Shape> {
    Ok(match r.u8()? {
        0 => Shape::Flat(r.u32()?),
        1 => Shape::Image {
            channels: r.u32()?,
            height: r.u32()?,
            width: r.u32()?,
        },
        other => return Err(Error::Checkpoint(format!("bad shape tag {other}"))),
    })
}

/// Plain-network weight table: parametric layers plus attached heads.
/// Reparameterized layers are never written here.
fn write_net(w: &mut Writer, net: &Network) -> Result<()> {
    let parametric = net.parametric_layers();
    w.u32(parametric.len());
    for idx in parametric {
        w.u32(idx);
        match net.layer_weights()[idx].as_ref().unwrap() {
            LayerWeights::Dense { w: m, b } => {
                w.u8(0);
                w.u32(m.rows());
                w.u32(m.cols());
                w.f32s(m.data());
                w.u32(b.len());
                w.f32s(b);
            }
            LayerWeights::Conv { w: t, b } => {
                w.u8(1);
                let (kh, kw, j, i) = t.dims();
                w.u32(kh);
                w.u32(kw);
                w.u32(j);
                w.u32(i);
                w.f32s(t.data());
                w.u32(b.len());
                w.f32s(b);
            }
            _ => {
                return Err(Error::Checkpoint(
                    "cannot persist a reparameterized network as a weight table".into(),
                ))
            }
        }
    }
    w.u32(net.heads().len());
    for (task, head) in net.heads() {
        w.u32(*task);
        write_head(w, head);
    }
    Ok(())
}

fn read_net(r: &mut Reader, skeleton: Network) -> Result<Network> {
    let mut net = skeleton;
    let n = r.u32()?;
    for _ in 0..n {
        let idx = r.u32()?;
        if idx >= net.layer_weights().len() {
            return Err(Error::Checkpoint(format!("layer index {idx} out of range")));
        }
        let kind = r.u8()?;
        let replacement = match kind {
            0 => {
                let rows = r.u32()?;
                let cols = r.u32()?;
                let data = r.f32s(rows * cols)?;
                let blen = r.u32()?;
                let b = r.f32s(blen)?;
                LayerWeights::Dense {
                    w: Matrix::from_vec(rows, cols, data),
                    b,
                }
            }
            1 => {
                let kh = r.u32()?;
                let kw = r.u32()?;
                let j = r.u32()?;
                let i = r.u32()?;
                let data = r.f32s(kh * kw * j * i)?;
                let blen = r.u32()?;
                let b = r.f32s(blen)?;
                let mut t = Tensor4::zeros(kh, kw, j, i);
                t.data_mut().copy_from_slice(&data);
                LayerWeights::Conv { w: t, b }
            }
            other => return Err(Error::Checkpoint(format!("bad layer kind {other}"))),
        };
        // Shape agreement with the skeleton.
        match (net.layer_weights()[idx].as_ref(), &replacement) {
            (Some(LayerWeights::Dense { w: old, .. }), LayerWeights::Dense { w: new, .. })
                if old.rows() == new.rows() && old.cols() == new.cols() => {}
            (Some(LayerWeights::Conv { w: old, .. }), LayerWeights::Conv { w: new, .. })
                if old.dims() == new.dims() => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "layer {idx} record does not match the configured architecture"
                )))
            }
        }
        net.layer_weights_mut()[idx] = Some(replacement);
    }
    let heads = r.u32()?;
    for _ in 0..heads {
        let task = r.u32()?;
        let head = read_head(r)?;
        net.set_head(task, head);
    }
    Ok(net)
}

fn write_head(w: &mut Writer, head: &Head) {
    w.u32(head.w.rows());
    w.u32(head.w.cols());
    w.f32s(head.w.data());
    w.f32s(&head.b);
}

fn read_head(r: &mut Reader) -> Result<Head> {
    let classes = r.u32()?;
    let in_dim = r.u32()?;
    let w = Matrix::from_vec(classes, in_dim, r.f32s(classes * in_dim)?);
    let b = r.f32s(classes)?;
    Ok(Head { w, b })
}

fn write_task_record(w: &mut Writer, task: &TaskPrivateParams) {
    w.u32(task.layers.len());
    for layer in &task.layers {
        w.u32(layer.layer_index);
        let j = layer.r.len();
        let i = layer.s.len();
        w.u32(j);
        w.u32(i);
        w.u32(layer.k);
        w.f32s(&layer.r);
        w.f32s(&layer.s);
        w.f32s(layer.low_rank.u_k.data());
        w.f32s(&layer.low_rank.sigma_k);
        w.f32s(layer.low_rank.v_k.data());
    }
    w.u32(task.biases.len());
    for b in &task.biases {
        w.u32(b.len());
        w.f32s(b);
    }
    write_head(
        w,
        &Head {
            w: task.head_w.clone(),
            b: task.head_b.clone(),
        },
    );
}

fn read_task_record(r: &mut Reader, task_id: usize) -> Result<TaskPrivateParams> {
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer_index = r.u32()?;
        let j = r.u32()?;
        let i = r.u32()?;
        let k = r.u32()?;
        let rv = r.f32s(j)?;
        let sv = r.f32s(i)?;
        let u = Matrix::from_vec(j, k, r.f32s(j * k)?);
        let sigma = r.f32s(k)?;
        let v = Matrix::from_vec(i, k, r.f32s(i * k)?);
        layers.push(TaskLayerParams {
            layer_index,
            r: rv,
            s: sv,
            low_rank: LowRankFactors {
                u_k: u,
                sigma_k: sigma,
                v_k: v,
                k,
            },
            k,
        });
    }
    let n_biases = r.u32()?;
    let mut biases = Vec::with_capacity(n_biases);
    for _ in 0..n_biases {
        let len = r.u32()?;
        biases.push(r.f32s(len)?);
    }
    let head = read_head(r)?;
    Ok(TaskPrivateParams {
        task_id,
        layers,
        biases,
        head_w: head.w,
        head_b: head.b,
    })
}

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

/// Serialize a run state; the config text rides along so loading can rebuild
/// the architecture without outside context.
pub fn save_checkpoint(path: &Path, state: &ContinualState, cfg: &RunConfig) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.bytes(cfg.to_text().as_bytes());
    let input_shape = match &state.model {
        ModelState::Halrp { base, .. } => base.input_shape(),
        ModelState::SingleTask { nets } => nets[0].input_shape(),
        ModelState::SeqFinetune { net } => net.input_shape(),
    };
    write_shape(&mut w, input_shape);
    w.u8(match state.config.mode {
        Mode::Halrp => 0,
        Mode::Stl => 1,
        Mode::SeqFinetune => 2,
    });
    let t = state.tasks_trained();
    w.u32(t);
    for &id in &state.task_ids {
        w.u32(id);
    }
    for &c in &state.class_counts {
        w.u32(c);
    }
    match &state.model {
        ModelState::Halrp { base, tasks } => {
            write_net(&mut w, base)?;
            for task in tasks {
                write_task_record(&mut w, task);
            }
        }
        ModelState::SingleTask { nets } => {
            for net in nets {
                write_net(&mut w, net)?;
            }
        }
        ModelState::SeqFinetune { net } => {
            write_net(&mut w, net)?;
        }
    }
    let checksum = {
        let mut h = Fnv1a::new();
        h.update(&w.buf);
        h.finish()
    };
    w.u64(checksum);
    std::fs::write(path, &w.buf)?;
    Ok(())
}

/// Load and validate a checkpoint, returning the rebuilt state and the
/// embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ContinualState, RunConfig)> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &buf[..MAGIC.len()] != MAGIC {
        if buf.starts_with(b"HALRP") {
            return Err(Error::Checkpoint(format!(
                "version mismatch: found {:?}, expected {:?}",
                String::from_utf8_lossy(&buf[..MAGIC.len()]),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        return Err(Error::Checkpoint("not a halrp checkpoint".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let recorded = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = {
        let mut h = Fnv1a::new();
        h.update(body);
        h.finish()
    };
    if recorded != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: recorded {recorded:#018x}, computed {computed:#018x}"
        )));
    }

    let mut r = Reader::new(&body[MAGIC.len()..]);
    let cfg_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
    let run_cfg = parse_config(&cfg_text)?;
    let input_shape = read_shape(&mut r)?;
    let mode = match r.u8()? {
        0 => Mode::Halrp,
        1 => Mode::Stl,
        2 => Mode::SeqFinetune,
        other => return Err(Error::Checkpoint(format!("bad mode tag {other}"))),
    };
    let t = r.u32()?;
    let task_ids: Vec<usize> = (0..t).map(|_| r.u32()).collect::<Result<_>>()?;
    let class_counts: Vec<usize> = (0..t).map(|_| r.u32()).collect::<Result<_>>()?;

    let specs = resolve_arch(&run_cfg.arch, input_shape)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let skeleton = || -> Result<Network> {
        Network::new(specs.clone(), input_shape, 0)
            .map_err(|e| Error::Checkpoint(format!("embedded architecture: {e}")))
    };

    let model = match mode {
        Mode::Halrp => {
            let base = read_net(&mut r, skeleton()?)?;
            let mut tasks = Vec::with_capacity(t);
            for pos in 0..t {
                tasks.push(read_task_record(&mut r, pos)?);
            }
            ModelState::Halrp { base, tasks }
        }
        Mode::Stl => {
            let mut nets = Vec::with_capacity(t);
            for _ in 0..t {
                nets.push(read_net(&mut r, skeleton()?)?);
            }
            ModelState::SingleTask { nets }
        }
        Mode::SeqFinetune => ModelState::SeqFinetune {
            net: read_net(&mut r, skeleton()?)?,
        },
    };
    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the model section",
            body.len() - MAGIC.len() - r.pos
        )));
    }

    let experiment = ExperimentConfig {
        mode,
        ..run_cfg.experiment.clone()
    };
    let state = ContinualState::from_parts(experiment, model, task_ids, class_counts);
    Ok((state, run_cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cl_engine::{run_sequence, ExperimentConfig};
    use crate::tasks::{gen_permuted, gen_synthetic};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("halrp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_run() -> (ContinualState, RunConfig, Vec<crate::tasks::TaskDataset>) {
        let cfg_text = "\
mode = halrp
epochs = 8
warmup_epochs = 1
lr = 0.2
batch_size = 8
arch = dense(10) relu
data = permuted
tasks = 2
classes = 3
dims = 12
samples_per_class = 10
noise = 0.05
data_seed = 42
";
        let run_cfg = parse_config(cfg_text).unwrap();
        let base = gen_synthetic(3, 12, 10, 0.05, 42);
        let tasks = gen_permuted(&base, 2, 42);
        let specs = resolve_arch(&run_cfg.arch, Shape::Flat(12)).unwrap();
        let (state, _) =
            run_sequence(&run_cfg.experiment, &specs, Shape::Flat(12), &tasks).unwrap();
        (state, run_cfg, tasks)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (state, cfg, _) = small_run();
        let dir = tmpdir();
        let p1 = dir.join("a.halrp");
        let p2 = dir.join("b.halrp");
        save_checkpoint(&p1, &state, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded_cfg, cfg);
        save_checkpoint(&p2, &loaded, &loaded_cfg).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_state_predicts_like_the_original() {
        let (state, cfg, tasks) = small_run();
        let dir = tmpdir();
        let path = dir.join("predict.halrp");
        save_checkpoint(&path, &state, &cfg).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        for pos in 0..tasks.len() {
            let a = crate::cl_engine::predict(&state, pos, &tasks[pos].test.inputs).unwrap();
            let b = crate::cl_engine::predict(&loaded, pos, &tasks[pos].test.inputs).unwrap();
            assert_eq!(a, b, "prediction drift on task {pos}");
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let (state, cfg, _) = small_run();
        let dir = tmpdir();
        let path = dir.join("corrupt.halrp");
        save_checkpoint(&path, &state, &cfg).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[mid] ^= 0x40; // restore
        bytes[6] = b'9'; // HALRP09
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn reference_modes_roundtrip() {
        for mode in ["stl", "seq_finetune"] {
            let cfg_text = format!(
                "mode = {mode}\nepochs = 4\nlr = 0.2\nbatch_size = 8\n\
                 arch = dense(8) relu\ndata = permuted\ntasks = 2\nclasses = 3\n\
                 dims = 12\nsamples_per_class = 8\nnoise = 0.05\ndata_seed = 1\n"
            );
            let run_cfg = parse_config(&cfg_text).unwrap();
            let base = gen_synthetic(3, 12, 8, 0.05, 1);
            let tasks = gen_permuted(&base, 2, 1);
            let specs = resolve_arch(&run_cfg.arch, Shape::Flat(12)).unwrap();
            let (state, _) =
                run_sequence(&run_cfg.experiment, &specs, Shape::Flat(12), &tasks).unwrap();
            let dir = tmpdir();
            let path = dir.join(format!("{mode}.halrp"));
            save_checkpoint(&path, &state, &run_cfg).unwrap();
            let (loaded, _) = load_checkpoint(&path).unwrap();
            for pos in 0..2 {
                let a = crate::cl_engine::predict(&state, pos, &tasks[pos].test.inputs).unwrap();
                let b = crate::cl_engine::predict(&loaded, pos, &tasks[pos].test.inputs).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn conv_trunk_roundtrip() {
        let cfg_text = "\
mode = halrp
epochs = 4
warmup_epochs = 1
lr = 0.1
batch_size = 8
arch = conv(3,3,1,1) relu maxpool(2) flatten
data = permuted
tasks = 2
classes = 3
dims = 36
samples_per_class = 10
noise = 0.1
data_seed = 2
image = 1,6,6
";
        let run_cfg = parse_config(cfg_text).unwrap();
        let base = gen_synthetic(3, 36, 10, 0.1, 2);
        let tasks = gen_permuted(&base, 2, 2);
        let shape = Shape::Image {
            channels: 1,
            height: 6,
            width: 6,
        };
        let specs = resolve_arch(&run_cfg.arch, shape).unwrap();
        let (state, _) = run_sequence(&run_cfg.experiment, &specs, shape, &tasks).unwrap();
        let dir = tmpdir();
        let path = dir.join("conv.halrp");
        save_checkpoint(&path, &state, &run_cfg).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        for pos in 0..2 {
            let a = crate::cl_engine::predict(&state, pos, &tasks[pos].test.inputs).unwrap();
            let b = crate::cl_engine::predict(&loaded, pos, &tasks[pos].test.inputs).unwrap();
            assert_eq!(a, b, "conv prediction drift on task {pos}");
        }
    }

    #[test]
    fn file_size_matches_parameter_accounting() {
        // Every stored value is one f32; the task payload is exactly the
        // increment-report numerator plus biases and heads, and the rest is
        // bounded, computable header overhead.
        let (state, cfg, _) = small_run();
        let dir = tmpdir();
        let path = dir.join("size.halrp");
        save_checkpoint(&path, &state, &cfg).unwrap();
        let actual = std::fs::read(&path).unwrap().len();

        let ModelState::Halrp { base, tasks } = &state.model else {
            panic!()
        };
        let mut expect = MAGIC.len() + 8; // magic + checksum
        expect += 4 + cfg.to_text().len(); // config echo
        expect += 1 + 4; // flat shape tag + dim
        expect += 1 + 4; // mode + task count
        expect += 8 * state.tasks_trained(); // ids + class counts

        // Base table.
        expect += 4;
        for idx in base.parametric_layers() {
            match base.layer_weights()[idx].as_ref().unwrap() {
                LayerWeights::Dense { w, b } => {
                    expect += 4 + 1 + 8 + 4 * w.data().len() + 4 + 4 * b.len();
                }
                LayerWeights::Conv { w, b } => {
                    expect += 4 + 1 + 16 + 4 * w.data().len() + 4 + 4 * b.len();
                }
                _ => unreachable!(),
            }
        }
        expect += 4;
        for head in base.heads().values() {
            expect += 4 + 8 + 4 * (head.w.data().len() + head.b.len());
        }

        // Task records: the layer payload is the param_count formula.
        for task in tasks {
            expect += 4;
            for layer in &task.layers {
                let (j, i, k) = (layer.r.len(), layer.s.len(), layer.k);
                expect += 16 + 4 * crate::perturb::param_count(j, i, k);
            }
            expect += 4;
            for b in &task.biases {
                expect += 4 + 4 * b.len();
            }
            expect += 8 + 4 * (task.head_w.data().len() + task.head_b.len());
        }
        assert_eq!(actual, expect, "checkpoint size drifted from the format");
    }

    #[test]
    fn experiment_config_survives_embedding() {
        let (state, cfg, _) = small_run();
        let dir = tmpdir();
        let path = dir.join("cfg.halrp");
        save_checkpoint(&path, &state, &cfg).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let expect = ExperimentConfig {
            mode: state.config.mode,
            ..cfg.experiment.clone()
        };
        assert_eq!(loaded.config, expect);
        assert_eq!(loaded.task_ids, state.task_ids);
        assert_eq!(loaded.class_counts, state.class_counts);
    }
}
