#include "stemjepa/dataio.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <nlohmann/json.hpp>

#include "stemjepa/error.h"

namespace stemjepa {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<std::string> default_labels() { return {"bass", "drums", "vocals", "other"}; }

bool ActivityMask::is_active(int stem) const {
    return std::binary_search(active.begin(), active.end(), stem);
}

std::vector<double> windowed_rms_db(const AudioChunk& audio, double window_s, double hop_s) {
    const auto n = static_cast<std::int64_t>(audio.size());
    std::vector<double> out;
    if (n == 0) return out;
    const std::int64_t win = std::clamp<std::int64_t>(std::llround(window_s * audio.sample_rate), 1, n);
    const std::int64_t hop = std::max<std::int64_t>(1, std::llround(hop_s * audio.sample_rate));

    std::vector<std::int64_t> starts;
    for (std::int64_t s = 0; s + win <= n; s += hop) starts.push_back(s);
    if (starts.empty() || starts.back() + win < n) starts.push_back(n - win);

    for (std::int64_t s : starts) {
        double acc = 0.0;
        for (std::int64_t i = s; i < s + win; ++i) {
            const double v = audio.samples[static_cast<std::size_t>(i)];
            acc += v * v;
        }
        const double rms = std::sqrt(acc / static_cast<double>(win));
        out.push_back(rms > 0.0 ? 20.0 * std::log10(rms) : -std::numeric_limits<double>::infinity());
    }
    return out;
}

ActivityMask detect_active_stems(const MultiTrackChunk& chunk, const ActivityConfig& cfg) {
    ActivityMask mask;
    for (std::size_t s = 0; s < chunk.stems.size(); ++s) {
        auto profile = windowed_rms_db(chunk.stems[s].audio, cfg.window_s, cfg.hop_s);
        const double peak = profile.empty() ? -std::numeric_limits<double>::infinity()
                                            : *std::max_element(profile.begin(), profile.end());
        if (peak > cfg.threshold_db) mask.active.push_back(static_cast<int>(s));
        mask.max_rms_db.push_back(peak);
        mask.rms_db.push_back(std::move(profile));
    }
    return mask;
}

ActivityMask detect_active_stems(const MultiTrackChunk& chunk, double threshold_db) {
    ActivityConfig cfg;
    cfg.threshold_db = threshold_db;
    return detect_active_stems(chunk, cfg);
}

AudioChunk mix_stems(std::span<const AudioChunk> stems) {
    if (stems.empty()) throw InputError("cannot mix an empty stem list");
    AudioChunk out = stems.front();
    for (std::size_t i = 1; i < stems.size(); ++i) {
        const AudioChunk& s = stems[i];
        if (s.size() != out.size()) {
            throw InputError("stem length mismatch in mix: " + std::to_string(s.size()) + " vs " +
                             std::to_string(out.size()));
        }
        if (s.sample_rate != out.sample_rate) throw InputError("stem sample-rate mismatch in mix");
        for (std::size_t j = 0; j < out.size(); ++j) out.samples[j] += s.samples[j];
    }
    return out;
}

SampleResult sample_context_target(const MultiTrackChunk& chunk, const ActivityMask& mask, DataRng& rng) {
    const auto& active = mask.active;
    if (active.size() < 2) return NeedsResample{};
    const int n_active = static_cast<int>(active.size());

    std::uniform_int_distribution<int> pick_target(0, n_active - 1);
    const int t = active[static_cast<std::size_t>(pick_target(rng))];
    std::uniform_int_distribution<int> pick_size(1, n_active - 1);
    const int size = pick_size(rng);

    std::vector<int> others;
    for (int a : active) {
        if (a != t) others.push_back(a);
    }
    // Partial Fisher-Yates: the first `size` entries are a uniform random subset.
    for (int i = 0; i < size; ++i) {
        std::uniform_int_distribution<int> pick(i, static_cast<int>(others.size()) - 1);
        std::swap(others[static_cast<std::size_t>(i)], others[static_cast<std::size_t>(pick(rng))]);
    }
    others.resize(static_cast<std::size_t>(size));
    std::sort(others.begin(), others.end());

    ContextTargetPair pair;
    std::vector<AudioChunk> parts;
    parts.reserve(others.size());
    for (int c : others) parts.push_back(chunk.stems[static_cast<std::size_t>(c)].audio);
    pair.context = mix_stems(parts);
    pair.target = chunk.stems[static_cast<std::size_t>(t)].audio;
    pair.target_label = chunk.stems[static_cast<std::size_t>(t)].label;
    pair.context_indices = std::move(others);
    pair.target_index = t;
    return pair;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus Corpus::load(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("corpus manifest not found: " + manifest_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw InputError("malformed corpus manifest " + manifest_path.string() + ": " + e.what());
    }

    Corpus corpus;
    corpus.root_ = fs::absolute(manifest_path).parent_path();
    try {
        if (doc.value("version", 0) != kManifestVersion) {
            throw ConfigError("unsupported corpus manifest version in " + manifest_path.string());
        }
        corpus.sample_rate_ = doc.at("sample_rate").get<int>();
        corpus.labels_ = doc.value("labels", default_labels());
        const json& tracks = doc.at("tracks");
        const json metadata = doc.value("metadata", json::object());
        for (auto it = tracks.begin(); it != tracks.end(); ++it) {
            TrackEntry entry;
            entry.id = it.key();
            for (const auto& label : corpus.labels_) {
                if (!it.value().contains(label)) continue;
                const fs::path rel = it.value().at(label).get<std::string>();
                entry.stems.push_back({label, rel.is_absolute() ? rel : corpus.root_ / rel});
            }
            for (auto s = it.value().begin(); s != it.value().end(); ++s) {
                if (std::find(corpus.labels_.begin(), corpus.labels_.end(), s.key()) == corpus.labels_.end()) {
                    throw InputError("track " + entry.id + " has stem with unknown label '" + s.key() + "'");
                }
            }
            if (entry.stems.empty()) throw InputError("track " + entry.id + " lists no stems");
            if (metadata.contains(entry.id)) {
                for (auto m = metadata[entry.id].begin(); m != metadata[entry.id].end(); ++m) {
                    entry.metadata[m.key()] = m.value().is_string() ? m.value().get<std::string>() : m.value().dump();
                }
            }
            std::uint64_t frames = std::numeric_limits<std::uint64_t>::max();
            for (const auto& stem : entry.stems) {
                const WavInfo info = read_wav_info(stem.path);
                if (info.sample_rate != corpus.sample_rate_) {
                    throw ConfigError("stem " + stem.path.string() + " has sample rate " +
                                      std::to_string(info.sample_rate) + ", corpus declares " +
                                      std::to_string(corpus.sample_rate_));
                }
                frames = std::min(frames, info.frames);
            }
            entry.frames = frames;
            corpus.tracks_.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw InputError("invalid corpus manifest " + manifest_path.string() + ": " + e.what());
    }
    // nlohmann::json objects iterate in key order; keep that as the canonical track order.
    return corpus;
}

double Corpus::track_duration(std::size_t i) const {
    return static_cast<double>(tracks_.at(i).frames) / sample_rate_;
}

MultiTrackChunk Corpus::read(std::size_t track_index, std::uint64_t offset, std::uint64_t count) const {
    const TrackEntry& entry = tracks_.at(track_index);
    if (offset + count > entry.frames) throw InputError("read past the end of track " + entry.id);
    MultiTrackChunk chunk;
    chunk.track_id = entry.id;
    chunk.offset = static_cast<double>(offset) / sample_rate_;
    for (const auto& stem : entry.stems) {
        chunk.stems.push_back({read_wav(stem.path, offset, static_cast<std::int64_t>(count)), stem.label});
    }
    return chunk;
}

MultiTrackChunk Corpus::read_full(std::size_t track_index) const {
    return read(track_index, 0, tracks_.at(track_index).frames);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> Corpus::split(std::size_t holdout) const {
    if (holdout >= tracks_.size() && holdout > 0) {
        throw ConfigError("holdout of " + std::to_string(holdout) + " tracks leaves no training tracks (corpus has " +
                          std::to_string(tracks_.size()) + ")");
    }
    std::vector<std::size_t> train, held;
    for (std::size_t i = 0; i < tracks_.size(); ++i) {
        (i + holdout < tracks_.size() ? train : held).push_back(i);
    }
    return {train, held};
}

std::optional<MultiTrackChunk> crop_chunk(const Corpus& corpus, std::size_t track_index, double duration,
                                          DataRng& rng) {
    const std::uint64_t count = samples_for(duration, corpus.sample_rate());
    const std::uint64_t frames = corpus.track(track_index).frames;
    if (frames < count) return std::nullopt;
    std::uniform_int_distribution<std::uint64_t> pick(0, frames - count);
    return corpus.read(track_index, pick(rng), count);
}

DataRng make_stream(std::uint64_t seed, std::uint64_t worker, std::uint64_t step, std::uint64_t slot) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(worker), static_cast<std::uint32_t>(step),
                      static_cast<std::uint32_t>(step >> 32), static_cast<std::uint32_t>(slot)};
    return DataRng(seq);
}

std::optional<ContextTargetPair> draw_training_pair(const Corpus& corpus, std::span<const std::size_t> pool,
                                                    const PairSamplerConfig& cfg, DataRng& rng,
                                                    std::vector<std::string>* skipped) {
    if (pool.empty()) throw ConfigError("no training tracks available");
    std::uniform_int_distribution<std::size_t> pick_track(0, pool.size() - 1);
    for (int attempt = 0; attempt < cfg.max_track_attempts; ++attempt) {
        const std::size_t track = pool[pick_track(rng)];
        for (int tries = 0; tries <= cfg.max_resample; ++tries) {
            auto chunk = crop_chunk(corpus, track, cfg.chunk_duration, rng);
            if (!chunk) break;
            const ActivityMask mask = detect_active_stems(*chunk, cfg.activity);
            SampleResult result = sample_context_target(*chunk, mask, rng);
            if (auto* pair = std::get_if<ContextTargetPair>(&result)) return std::move(*pair);
        }
        if (skipped) skipped->push_back(corpus.track(track).id);
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr std::array<const char*, 12> kPitchNames{"C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};

double midi_to_hz(double midi) { return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0); }

struct Envelope {
    double attack = 0.005;
    double decay = 0.2;    // exponential time constant
    double sustain = 0.0;  // level the decay settles to
    double release = 0.02;
};

class Renderer {
public:
    Renderer(std::size_t n, int sr) : buf(n, 0.0), sr_(sr) {}

    // Additive tone with optional vibrato; harmonics above Nyquist are dropped.
    void tone(double start, double dur, double midi, double amp, std::span<const double> harmonics,
              const Envelope& env, double vib_rate = 0.0, double vib_semitones = 0.0) {
        const auto i0 = static_cast<std::int64_t>(start * sr_);
        const auto len = static_cast<std::int64_t>(dur * sr_);
        const double base = midi_to_hz(midi);
        double phase = 0.0;
        for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t i = i0 + k;
            if (i < 0) continue;
            if (i >= static_cast<std::int64_t>(buf.size())) break;
            const double t = static_cast<double>(k) / sr_;
            const double f = vib_semitones > 0.0
                                 ? base * std::pow(2.0, vib_semitones * std::sin(2.0 * std::numbers::pi * vib_rate * t) / 12.0)
                                 : base;
            phase += 2.0 * std::numbers::pi * f / sr_;
            double v = 0.0;
            for (std::size_t h = 0; h < harmonics.size(); ++h) {
                if (f * static_cast<double>(h + 1) >= 0.45 * sr_) break;
                v += harmonics[h] * std::sin(phase * static_cast<double>(h + 1));
            }
            buf[static_cast<std::size_t>(i)] += amp * envelope(env, t, dur) * v;
        }
    }

    void kick(double start) {
        const auto i0 = static_cast<std::int64_t>(start * sr_);
        double phase = 0.0;
        for (std::int64_t k = 0; k < static_cast<std::int64_t>(0.3 * sr_); ++k) {
            const std::int64_t i = i0 + k;
            if (i >= static_cast<std::int64_t>(buf.size())) break;
            const double t = static_cast<double>(k) / sr_;
            phase += 2.0 * std::numbers::pi * (50.0 + 90.0 * std::exp(-t / 0.03)) / sr_;
            buf[static_cast<std::size_t>(i)] += 0.9 * std::exp(-t / 0.15) * std::sin(phase);
        }
    }

    void snare(double start, double gain, DataRng& rng) {
        noise_hit(start, 0.22, 0.07, gain, 0.6, rng);
        tone(start, 0.15, 54.0, 0.35 * gain, std::array<double, 1>{1.0}, Envelope{0.001, 0.05, 0.0, 0.01});
    }

    void hihat(double start, double gain, DataRng& rng) { noise_hit(start, 0.07, 0.02, gain, 0.95, rng); }

    std::vector<double> buf;

private:
    // Noise burst through a one-pole high-pass; `brightness` is the filter pole.
    void noise_hit(double start, double dur, double tau, double gain, double brightness, DataRng& rng) {
        std::uniform_real_distribution<double> white(-1.0, 1.0);
        const auto i0 = static_cast<std::int64_t>(start * sr_);
        double prev_in = 0.0, prev_out = 0.0;
        for (std::int64_t k = 0; k < static_cast<std::int64_t>(dur * sr_); ++k) {
            const double x = white(rng);
            const double y = brightness * (prev_out + x - prev_in);
            prev_in = x;
            prev_out = y;
            const std::int64_t i = i0 + k;
            if (i >= static_cast<std::int64_t>(buf.size())) break;
            const double t = static_cast<double>(k) / sr_;
            buf[static_cast<std::size_t>(i)] += gain * std::exp(-t / tau) * y;
        }
    }

    static double envelope(const Envelope& env, double t, double dur) {
        double a = std::min(1.0, t / env.attack);
        a *= env.sustain + (1.0 - env.sustain) * std::exp(-t / env.decay);
        const double tail = dur - t;
        if (tail < env.release) a *= std::max(0.0, tail / env.release);
        return a;
    }

    int sr_;
};

AudioChunk finalize_stem(const std::vector<double>& buf, int sr) {
    // Normalize to -18 dBFS RMS, then keep peaks below full scale.
    double acc = 0.0, peak = 0.0;
    for (double v : buf) {
        acc += v * v;
        peak = std::max(peak, std::abs(v));
    }
    const double rms = std::sqrt(acc / std::max<std::size_t>(1, buf.size()));
    double gain = rms > 0.0 ? std::pow(10.0, -18.0 / 20.0) / rms : 0.0;
    if (peak * gain > 0.95) gain = 0.95 / peak;
    AudioChunk out;
    out.sample_rate = sr;
    out.samples.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) out.samples[i] = static_cast<float>(buf[i] * gain);
    return out;
}

template <typename T>
const T& choose(const std::vector<T>& items, DataRng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
    return items[pick(rng)];
}

bool coin(double p, DataRng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

struct Chord {
    double start_beat = 0.0;
    double beats = 4.0;
    std::array<int, 3> pitch_classes{};
    std::string name;
};

Chord make_chord(const MusicalKey& key, int degree) {
    const auto scale = key.scale();
    Chord c;
    for (int i = 0; i < 3; ++i) c.pitch_classes[i] = scale[static_cast<std::size_t>((degree + 2 * i) % 7)];
    const int third = (c.pitch_classes[1] - c.pitch_classes[0] + 12) % 12;
    const int fifth = (c.pitch_classes[2] - c.pitch_classes[0] + 12) % 12;
    const char* quality = third == 4 ? "maj" : fifth == 6 ? "dim" : "min";
    c.name = std::string(kPitchNames[static_cast<std::size_t>(c.pitch_classes[0])]) + ":" + quality;
    return c;
}

// Nearest MIDI note with pitch class `pc` at or above `low`.
int note_at_or_above(int pc, int low) {
    int n = low + ((pc - low) % 12 + 12) % 12;
    return n;
}

std::uint64_t track_seed(std::uint64_t seed, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), 0x5eedu};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

void SynthSpec::validate() const {
    if (tracks <= 0) throw ConfigError("synth.tracks must be positive");
    if (!(duration > 0.0)) throw ConfigError("synth.duration must be positive");
    if (!(tempo_min > 0.0) || tempo_max < tempo_min) throw ConfigError("synth tempo range is invalid");
    if (keys.empty()) throw ConfigError("synth.keys must not be empty");
    for (const auto& k : keys) parse_key(k);
    if (sample_rate <= 0) throw ConfigError("synth.sample_rate must be positive");
}

std::vector<int> MusicalKey::scale() const {
    static constexpr std::array<int, 7> kMajor{0, 2, 4, 5, 7, 9, 11};
    static constexpr std::array<int, 7> kMinor{0, 2, 3, 5, 7, 8, 10};
    const auto& steps = minor ? kMinor : kMajor;
    std::vector<int> out;
    for (int s : steps) out.push_back((tonic + s) % 12);
    return out;
}

MusicalKey parse_key(const std::string& name) {
    if (name.empty()) throw ConfigError("empty key name");
    static const std::map<char, int> kLetters{{'C', 0}, {'D', 2}, {'E', 4}, {'F', 5}, {'G', 7}, {'A', 9}, {'B', 11}};
    auto it = kLetters.find(name[0]);
    if (it == kLetters.end()) throw ConfigError("invalid key name '" + name + "'");
    MusicalKey key;
    key.name = name;
    key.tonic = it->second;
    std::size_t pos = 1;
    if (pos < name.size() && (name[pos] == '#' || name[pos] == 'b')) {
        key.tonic = (key.tonic + (name[pos] == '#' ? 1 : 11)) % 12;
        ++pos;
    }
    if (pos < name.size() && name[pos] == 'm') {
        key.minor = true;
        ++pos;
    }
    if (pos != name.size()) throw ConfigError("invalid key name '" + name + "'");
    return key;
}

SynthTrack synthesize_track(const SynthSpec& spec, std::uint64_t seed, int index) {
    DataRng rng(track_seed(seed, index));
    const int sr = spec.sample_rate;
    const std::size_t n = samples_for(spec.duration, sr);

    SynthTrack track;
    char id[32];
    std::snprintf(id, sizeof(id), "track_%04d", index);
    track.id = id;
    track.key = parse_key(choose(spec.keys, rng));
    track.tempo = std::uniform_real_distribution<double>(spec.tempo_min, spec.tempo_max)(rng);
    const double beat = 60.0 / track.tempo;
    const double total_beats = spec.duration / beat;

    // Chord progression with irregular chord lengths.
    const std::vector<int> degrees{0, 0, 0, 3, 3, 4, 4, 5, 5, 1};
    const std::vector<double> lengths{2.0, 4.0, 4.0, 4.0, 8.0};
    std::vector<Chord> chords;
    int prev = -1;
    for (double b = 0.0; b < total_beats;) {
        int degree = choose(degrees, rng);
        if (degree == prev) degree = (degree + 3) % 7;
        prev = degree;
        Chord c = make_chord(track.key, degree);
        c.start_beat = b;
        c.beats = choose(lengths, rng);
        b += c.beats;
        chords.push_back(c);
        track.chords.push_back({c.start_beat * beat, std::min(spec.duration, (c.start_beat + c.beats) * beat), c.name});
    }

    Renderer bass(n, sr), drums(n, sr), vocals(n, sr), other(n, sr);

    // Bass: root-note pulse on an eighth-note pattern fixed per track.
    std::array<bool, 8> bass_pattern{};
    bass_pattern[0] = true;
    for (std::size_t i = 1; i < 8; ++i) bass_pattern[i] = coin(0.45, rng);
    const std::array<double, 6> bass_harm{1.0, 0.5, 0.33, 0.25, 0.2, 0.16};
    for (const Chord& c : chords) {
        const int root = note_at_or_above(c.pitch_classes[0], 36);
        for (double b = 0.0; b < c.beats; b += 0.5) {
            const auto step = static_cast<std::size_t>(std::lround((c.start_beat + b) * 2.0)) % 8;
            if (!bass_pattern[step] && !(b == 0.0)) continue;
            int note = root;
            if (b > 0.0 && coin(0.15, rng)) note = root + 7;
            if (b > 0.0 && coin(0.1, rng)) note = root + 12;
            bass.tone((c.start_beat + b) * beat, 0.45 * beat, note, 0.8, bass_harm,
                      Envelope{0.005, 0.25, 0.3, 0.03});
        }
    }

    // Drums: kick/snare backbeat with hats on the eighth grid and occasional fills.
    const bool busy_kick = coin(0.5, rng);
    const double hat_drop = std::uniform_real_distribution<double>(0.0, 0.35)(rng);
    for (int bar = 0; bar * 4.0 < total_beats; ++bar) {
        const bool fill = bar % 4 == 3 && coin(0.6, rng);
        for (int e = 0; e < 8; ++e) {
            const double t = (bar * 4.0 + e * 0.5) * beat;
            if (t >= spec.duration) break;
            if (e == 0 || e == 4 || (busy_kick && e == 3 && coin(0.7, rng)) || (e == 7 && coin(0.2, rng))) {
                drums.kick(t);
            }
            if (e == 2 || e == 6 || (fill && e >= 5)) drums.snare(t, e == 2 || e == 6 ? 0.8 : 0.5, rng);
            if (!coin(hat_drop, rng)) drums.hihat(t, e % 2 == 0 ? 0.35 : 0.22, rng);
        }
    }

    // Vocals: phrases of scale notes biased towards chord tones, with vibrato and rests.
    const auto scale = track.key.scale();
    const std::array<double, 7> voice_harm{1.0, 0.55, 0.35, 0.25, 0.15, 0.1, 0.07};
    const std::vector<double> note_lengths{0.5, 0.5, 1.0, 1.0, 1.5, 2.0};
    const std::vector<double> rests{0.5, 1.0, 1.0, 2.0};
    int pitch = note_at_or_above(scale[0], 62);
    std::size_t chord_idx = 0;
    for (double b = choose(rests, rng); b < total_beats;) {
        const double phrase_end = b + std::uniform_real_distribution<double>(3.0, 9.0)(rng);
        while (b < phrase_end && b < total_beats) {
            while (chord_idx + 1 < chords.size() && chords[chord_idx + 1].start_beat <= b) ++chord_idx;
            const Chord& c = chords[chord_idx];
            if (coin(0.6, rng)) {
                const int pc = c.pitch_classes[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
                pitch = note_at_or_above(pc, std::clamp(pitch - 5, 60, 72));
            } else {
                // step to a neighbouring scale tone
                int cand = pitch + (coin(0.5, rng) ? 1 : -1);
                while (std::find(scale.begin(), scale.end(), ((cand % 12) + 12) % 12) == scale.end()) {
                    cand += cand > pitch ? 1 : -1;
                }
                pitch = std::clamp(cand, 60, 79);
            }
            const double len = choose(note_lengths, rng);
            vocals.tone(b * beat, len * beat * 0.95, pitch, 0.6, voice_harm, Envelope{0.04, 0.6, 0.7, 0.06},
                        5.5, 0.25);
            b += len;
        }
        b += choose(rests, rng);
    }

    // Other: sustained triad pad following the progression.
    const std::array<double, 4> pad_harm{1.0, 0.4, 0.2, 0.1};
    for (const Chord& c : chords) {
        for (int i = 0; i < 3; ++i) {
            const int note = note_at_or_above(c.pitch_classes[static_cast<std::size_t>(i)], 53);
            other.tone(c.start_beat * beat, c.beats * beat, note, 0.3, pad_harm, Envelope{0.08, 1.0, 0.8, 0.1});
        }
    }

    track.stems = {finalize_stem(bass.buf, sr), finalize_stem(drums.buf, sr), finalize_stem(vocals.buf, sr),
                   finalize_stem(other.buf, sr)};
    return track;
}

fs::path generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());
    fs::create_directories(out_dir / "tasks", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "tasks").string() + ": " + ec.message());

    const auto labels = default_labels();
    json manifest = {{"format", "stemjepa-corpus"},
                     {"version", Corpus::kManifestVersion},
                     {"sample_rate", spec.sample_rate},
                     {"labels", labels},
                     {"tracks", json::object()},
                     {"metadata", json::object()}};
    std::ofstream annotations(out_dir / "annotations.jsonl", std::ios::trunc);
    std::ofstream key_task(out_dir / "tasks" / "key.jsonl", std::ios::trunc);
    if (!annotations || !key_task) throw IoError("cannot write annotation files in " + out_dir.string());

    for (int i = 0; i < spec.tracks; ++i) {
        const SynthTrack track = synthesize_track(spec, seed, i);
        fs::create_directories(out_dir / track.id, ec);
        if (ec) throw IoError("cannot create " + (out_dir / track.id).string() + ": " + ec.message());
        json stems = json::object();
        for (std::size_t s = 0; s < labels.size(); ++s) {
            const std::string rel = track.id + "/" + labels[s] + ".wav";
            write_wav(out_dir / rel, track.stems[s], WavSampleFormat::kPcm16);
            stems[labels[s]] = rel;
        }
        const std::string mixture = track.id + "/mixture.wav";
        if (spec.write_mixture) {
            write_wav(out_dir / mixture, mix_stems(track.stems), WavSampleFormat::kFloat32);
        }
        manifest["tracks"][track.id] = stems;
        char tempo[32];
        std::snprintf(tempo, sizeof(tempo), "%.3f", track.tempo);
        manifest["metadata"][track.id] = {{"key", track.key.name}, {"tempo", tempo}};

        if (spec.write_mixture) {
            for (const auto& seg : track.chords) {
                annotations << json{{"clip", mixture}, {"start", seg.start}, {"end", seg.end},
                                    {"label", seg.chord}, {"key", track.key.name}}
                                   .dump()
                            << '\n';
            }
            const char* split = i % 10 < 8 ? "train" : i % 10 == 8 ? "valid" : "test";
            key_task << json{{"clip", "../" + mixture}, {"label", track.key.name}, {"split", split}}.dump() << '\n';
        }
    }

    const fs::path manifest_path = out_dir / "manifest.json";
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest_path.string());
    out << manifest.dump(2) << '\n';
    return manifest_path;
}

fs::path import_musdb(const fs::path& musdb_root, const fs::path& cache_dir, int sample_rate) {
    if (!fs::is_directory(musdb_root)) throw IoError("MUSDB18 directory not found: " + musdb_root.string());
    const auto labels = default_labels();
    std::vector<fs::path> track_dirs;
    for (const auto& entry : fs::recursive_directory_iterator(musdb_root)) {
        if (entry.is_directory() && fs::exists(entry.path() / "bass.wav") && fs::exists(entry.path() / "drums.wav")) {
            track_dirs.push_back(entry.path());
        }
    }
    std::sort(track_dirs.begin(), track_dirs.end());
    if (track_dirs.empty()) {
        throw InputError("no MUSDB18-HQ track folders (with bass.wav, drums.wav, ...) under " + musdb_root.string());
    }

    fs::create_directories(cache_dir);
    json manifest = {{"format", "stemjepa-corpus"},
                     {"version", Corpus::kManifestVersion},
                     {"sample_rate", sample_rate},
                     {"labels", labels},
                     {"tracks", json::object()}};
    for (const auto& dir : track_dirs) {
        std::string id = fs::relative(dir, musdb_root).generic_string();
        std::replace(id.begin(), id.end(), '/', '_');
        fs::create_directories(cache_dir / id);
        json stems = json::object();
        for (const auto& label : labels) {
            const fs::path src = dir / (label + ".wav");
            if (!fs::exists(src)) throw InputError("missing stem " + src.string());
            const std::string rel = id + "/" + label + ".wav";
            if (!fs::exists(cache_dir / rel)) {
                write_wav(cache_dir / rel, resample(read_wav(src), sample_rate), WavSampleFormat::kFloat32);
            }
            stems[label] = rel;
        }
        manifest["tracks"][id] = stems;
    }
    const fs::path manifest_path = cache_dir / "manifest.json";
    std::ofstream out(manifest_path, std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + manifest_path.string());
    return manifest_path;
}

}  // namespace stemjepa
