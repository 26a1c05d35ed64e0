//! Deterministic synthetic multi-speaker corpus plus disk import/export.
//!
//! Each speaker is a fixed random timbre — a harmonic stack with a spectral
//! tilt pushed through two resonant filters — and each utterance excites that
//! timbre with its own pitch contour, vibrato, phases, and noise floor, so
//! same-speaker utterances cluster spectrally while staying distinct.

use crate::error::{Error, Result};
use crate::rng::{normal_vec, rng_from, stream};
use ndarray::Array1;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub samples: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    /// Virtual sample rate in samples/second.
    pub sample_rate: u32,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn by_id(&self, id: &str) -> Result<&Utterance> {
        self.utterances
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::Data(format!("utterance id `{id}` not in corpus")))
    }

    /// Speakers in sorted order (stable label assignment).
    pub fn speakers(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> =
            self.utterances.iter().map(|u| u.speaker.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Speaker name → classifier label, sorted-name order.
    pub fn speaker_labels(&self) -> BTreeMap<String, usize> {
        self.speakers()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Length of each utterance in seconds.
    pub seconds: f64,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            utts_per_speaker: 6,
            seconds: 4.0,
            sample_rate: 4000,
        }
    }
}

const N_HARMONICS: usize = 6;
const TAU: f64 = std::f64::consts::TAU;

/// One second-order resonator y_t = x_t + 2r·cos(ω)·y_{t-1} − r²·y_{t-2}.
#[derive(Debug, Clone, Copy)]
struct Resonator {
    two_r_cos: f64,
    r_sq: f64,
}

impl Resonator {
    fn draw(rng: &mut rand_chacha::ChaCha8Rng, rate: f64) -> Self {
        let fc = rng.gen_range(300.0..1700.0);
        let bw = rng.gen_range(80.0..400.0);
        let r = (-std::f64::consts::PI * bw / rate).exp();
        let omega = TAU * fc / rate;
        Self {
            two_r_cos: 2.0 * r * omega.cos(),
            r_sq: r * r,
        }
    }

    fn apply(&self, wave: &mut [f64]) {
        let (mut y1, mut y2) = (0.0, 0.0);
        for x in wave.iter_mut() {
            let y = *x + self.two_r_cos * y1 - self.r_sq * y2;
            y2 = y1;
            y1 = y;
            *x = y;
        }
    }
}

/// Per-speaker latent timbre, drawn once from the speaker's seed stream.
#[derive(Debug, Clone)]
struct Timbre {
    f0: f64,
    harmonic_amps: [f64; N_HARMONICS],
    filters: [Resonator; 2],
}

impl Timbre {
    fn draw(seed: u64, speaker: u64, rate: f64) -> Self {
        let mut rng = rng_from(seed, &[stream::CORPUS, speaker, 0]);
        let f0 = rng.gen_range(90.0..260.0);
        let mut harmonic_amps = [0.0; N_HARMONICS];
        for (k, a) in harmonic_amps.iter_mut().enumerate() {
            // tilt: higher harmonics weaker
            *a = rng.gen_range(0.2..1.0) / (k + 1) as f64;
        }
        let filters = [Resonator::draw(&mut rng, rate), Resonator::draw(&mut rng, rate)];
        Self { f0, harmonic_amps, filters }
    }
}

fn synth_utterance(timbre: &Timbre, seed: u64, speaker: u64, utt: u64, n: usize, rate: f64) -> Array1<f64> {
    let mut rng = rng_from(seed, &[stream::CORPUS, speaker, utt + 1]);
    let vib_rate = rng.gen_range(0.5..2.0);
    let vib_depth = rng.gen_range(0.03..0.1);
    let vib_phase = rng.gen_range(0.0..TAU);
    let mut phases = [0.0; N_HARMONICS];
    for p in phases.iter_mut() {
        *p = rng.gen_range(0.0..TAU);
    }
    let noise_amp = rng.gen_range(0.02..0.08);
    let gain = rng.gen_range(0.6..1.0);
    let noise = normal_vec(n, &mut rng);

    let mut wave = vec![0.0f64; n];
    let mut theta = 0.0;
    for (t, w) in wave.iter_mut().enumerate() {
        let secs = t as f64 / rate;
        let f0_t = timbre.f0 * (1.0 + vib_depth * (TAU * vib_rate * secs + vib_phase).sin());
        theta += TAU * f0_t / rate;
        let mut x = 0.0;
        for (k, (&a, &p)) in timbre.harmonic_amps.iter().zip(&phases).enumerate() {
            x += a * ((k + 1) as f64 * theta + p).sin();
        }
        *w = x + noise_amp * noise[t];
    }
    for f in &timbre.filters {
        f.apply(&mut wave);
    }
    // normalize to a per-utterance loudness: RMS = 0.1·gain
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = 0.1 * gain / rms;
    Array1::from_iter(wave.into_iter().map(|v| v * scale))
}

/// Deterministic synthetic corpus: same `(spec, seed)` → identical samples.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    if spec.n_speakers < 2 {
        return Err(Error::Config(format!(
            "need at least 2 speakers, got {}",
            spec.n_speakers
        )));
    }
    if spec.utts_per_speaker == 0 {
        return Err(Error::Config("need at least 1 utterance per speaker".into()));
    }
    if !(spec.seconds > 0.0) || spec.sample_rate == 0 {
        return Err(Error::Config(format!(
            "degenerate utterance size: {}s at {} samples/s",
            spec.seconds, spec.sample_rate
        )));
    }
    let rate = spec.sample_rate as f64;
    let n = (spec.seconds * rate).round() as usize;
    if n == 0 {
        return Err(Error::Config("utterances would have zero samples".into()));
    }
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        let timbre = Timbre::draw(seed, s as u64, rate);
        let speaker = format!("spk{s}");
        for u in 0..spec.utts_per_speaker {
            let samples = synth_utterance(&timbre, seed, s as u64, u as u64, n, rate);
            utterances.push(Utterance {
                id: format!("{speaker}_u{u}"),
                speaker: speaker.clone(),
                samples,
            });
        }
    }
    Ok(Corpus {
        sample_rate: spec.sample_rate,
        utterances,
    })
}

const UTT_MAGIC: &str = "oskdft-utt-v1";

fn write_utterance(u: &Utterance, rate: u32, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let header = format!(
        "{UTT_MAGIC}\nid {}\nspeaker {}\nrate {rate}\nsamples {}\n",
        u.id,
        u.speaker,
        u.samples.len()
    );
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for v in u.samples.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

fn read_utterance(path: &Path) -> Result<(Utterance, u32)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut header = [String::new(), String::new(), String::new(), String::new(), String::new()];
    for (i, line) in header.iter_mut().enumerate() {
        if r.read_line(line).map_err(io_err)? == 0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("truncated utterance header in {}", path.display()),
            });
        }
    }
    if header[0].trim_end() != UTT_MAGIC {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad utterance magic in {}", path.display()),
        });
    }
    let field = |idx: usize, key: &str| -> Result<String> {
        header[idx]
            .trim_end()
            .strip_prefix(&format!("{key} "))
            .map(String::from)
            .ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `{key} ...` in {}", path.display()),
            })
    };
    let id = field(1, "id")?;
    let speaker = field(2, "speaker")?;
    let rate: u32 = field(3, "rate")?.parse().map_err(|_| Error::Parse {
        line: 4,
        msg: "bad rate".into(),
    })?;
    let n: usize = field(4, "samples")?.parse().map_err(|_| Error::Parse {
        line: 5,
        msg: "bad sample count".into(),
    })?;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    let samples: Array1<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Utterance { id, speaker, samples }, rate))
}

/// Write one file per utterance plus a `manifest.txt` of `id speaker path`
/// lines (paths relative to the manifest). Returns the manifest path.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let utt_dir = dir.join("utt");
    std::fs::create_dir_all(&utt_dir).map_err(|e| Error::io(utt_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let rel = format!("utt/{}.f64", u.id);
        write_utterance(u, corpus.sample_rate, &dir.join(&rel))?;
        manifest.push_str(&format!("{} {} {}\n", u.id, u.speaker, rel));
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(mpath)
}

/// Load a corpus back from a manifest; works over any files in the utterance
/// format, not only exported synthetic ones.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::new();
    let mut rate: Option<u32> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("manifest line needs `id speaker path`, got `{line}`"),
            });
        }
        let (u, r) = read_utterance(&base.join(parts[2]))?;
        if u.id != parts[0] || u.speaker != parts[1] {
            return Err(Error::Data(format!(
                "manifest says {}/{} but file {} holds {}/{}",
                parts[0], parts[1], parts[2], u.id, u.speaker
            )));
        }
        match rate {
            None => rate = Some(r),
            Some(r0) if r0 != r => {
                return Err(Error::Data(format!(
                    "mixed sample rates in corpus: {r0} vs {r}"
                )))
            }
            _ => {}
        }
        utterances.push(u);
    }
    if utterances.is_empty() {
        return Err(Error::Data(format!(
            "empty manifest: {}",
            manifest_path.display()
        )));
    }
    Ok(Corpus {
        sample_rate: rate.expect("nonempty"),
        utterances,
    })
}
