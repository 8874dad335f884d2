#include "mednvc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mednvc {

const std::array<const char*, 18> kManifestColumns = {
    "patient_id",     "image_path",          "label",
    "crp",            "esr",                 "joint",
    "position",       "sex",                 "age",
    "hypertension",   "diabetes",            "rheumatoid_arthritis",
    "anemia",         "osteoporosis",        "cerebral_infarction",
    "hypoalbuminemia", "hypothyroidism",     "liver_disease"};

const std::array<const char*, kLabDim> kFeatureNames = {
    "crp",          "esr",
    "joint_position",  // merged code: 2*joint + position
    "sex",          "age",
    "hypertension", "diabetes",      "rheumatoid_arthritis", "anemia",
    "osteoporosis", "cerebral_infarction", "hypoalbuminemia", "hypothyroidism",
    "liver_disease"};

// ---- images ----------------------------------------------------------------

namespace {

// Next whitespace-delimited token, skipping '#' comments per the PNM grammar.
std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw ingest_error(path + ": truncated PNM header");
    return tok;
}

int pnm_int(std::istream& in, const std::string& path, const char* what) {
    const std::string tok = pnm_token(in, path);
    try {
        std::size_t pos = 0;
        const int v = std::stoi(tok, &pos);
        if (pos != tok.size() || v < 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw ingest_error(path + ": bad PNM " + what + " '" + tok + "'");
    }
}

float bilinear_at(const float* plane, int h, int w, double y, double x) {
    // zero outside the image
    if (y <= -1.0 || x <= -1.0 || y >= h || x >= w) return 0.0f;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto at = [&](int yy, int xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return plane[static_cast<std::size_t>(yy) * w + xx];
    };
    return static_cast<float>(at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                              at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx);
}

}  // namespace

RawImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ingest_error(path + ": cannot open image");
    const std::string magic = pnm_token(in, path);
    RawImage img;
    if (magic == "P5") {
        img.channels = 1;
    } else if (magic == "P6") {
        img.channels = 3;
    } else {
        throw ingest_error(path + ": unsupported image magic '" + magic + "' (want P5 or P6)");
    }
    img.w = pnm_int(in, path, "width");
    img.h = pnm_int(in, path, "height");
    const int maxval = pnm_int(in, path, "maxval");
    if (img.w < 1 || img.h < 1) throw ingest_error(path + ": empty image");
    if (maxval < 1 || maxval > 255) {
        throw ingest_error(path + ": unsupported maxval " + std::to_string(maxval));
    }
    // exactly one whitespace byte separates header and payload
    const std::size_t n = static_cast<std::size_t>(img.w) * img.h * img.channels;
    img.pixels.resize(n);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw ingest_error(path + ": truncated pixel payload");
    }
    if (maxval != 255) {
        for (auto& p : img.pixels) {
            p = static_cast<std::uint8_t>(
                std::lround(255.0 * static_cast<double>(p) / maxval));
        }
    }
    return img;
}

void write_pgm(const std::string& path, int w, int h, const std::vector<std::uint8_t>& gray) {
    if (gray.size() != static_cast<std::size_t>(w) * h) {
        throw ingest_error(path + ": pixel buffer does not match " + std::to_string(w) + "x" +
                           std::to_string(h));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ingest_error(path + ": cannot write image");
    out << "P5\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!out) throw ingest_error(path + ": short write");
}

std::vector<float> to_chw(const RawImage& img) {
    const std::size_t hw = static_cast<std::size_t>(img.w) * img.h;
    std::vector<float> out(3 * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        for (int c = 0; c < 3; ++c) {
            const std::uint8_t v = img.channels == 1 ? img.pixels[i] : img.pixels[i * 3 + c];
            out[c * hw + i] = static_cast<float>(v) / 255.0f;
        }
    }
    return out;
}

std::vector<float> bilinear_resize(const std::vector<float>& chw, int c, int h, int w, int oh,
                                   int ow) {
    if (chw.size() != static_cast<std::size_t>(c) * h * w) {
        throw dim_error("resize: buffer does not match " + std::to_string(c) + "x" +
                        std::to_string(h) + "x" + std::to_string(w));
    }
    if (h == oh && w == ow) return chw;
    std::vector<float> out(static_cast<std::size_t>(c) * oh * ow);
    const double sy = static_cast<double>(h) / oh;
    const double sx = static_cast<double>(w) / ow;
    for (int ci = 0; ci < c; ++ci) {
        const float* src = chw.data() + static_cast<std::size_t>(ci) * h * w;
        float* dst = out.data() + static_cast<std::size_t>(ci) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
            for (int x = 0; x < ow; ++x) {
                const double fx =
                    std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
                dst[static_cast<std::size_t>(y) * ow + x] = bilinear_at(src, h, w, fy, fx);
            }
        }
    }
    return out;
}

void hflip_image(std::vector<float>& chw, int c, int h, int w) {
    for (int ci = 0; ci < c; ++ci) {
        float* plane = chw.data() + static_cast<std::size_t>(ci) * h * w;
        for (int y = 0; y < h; ++y) {
            float* row = plane + static_cast<std::size_t>(y) * w;
            std::reverse(row, row + w);
        }
    }
}

void rotate_image(std::vector<float>& chw, int c, int h, int w, double deg) {
    if (deg == 0.0) return;
    const double rad = deg * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    std::vector<float> rotated(chw.size());
    for (int ci = 0; ci < c; ++ci) {
        const float* src = chw.data() + static_cast<std::size_t>(ci) * h * w;
        float* dst = rotated.data() + static_cast<std::size_t>(ci) * h * w;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                // inverse rotation about the image center
                const double dy = y - cy, dx = x - cx;
                const double sy = cy + dy * cs - dx * sn;
                const double sx = cx + dy * sn + dx * cs;
                dst[static_cast<std::size_t>(y) * w + x] = bilinear_at(src, h, w, sy, sx);
            }
        }
    }
    chw = std::move(rotated);
}

void augment_image(std::vector<float>& chw, int c, int h, int w, Rng& rng) {
    const bool flip = rng.bernoulli(0.5);
    const double deg = rng.uniform_range(-15.0, 15.0);
    if (flip) hflip_image(chw, c, h, w);
    rotate_image(chw, c, h, w, deg);
}

// ---- manifest --------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    for (auto& f : fields) {
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.erase(f.begin());
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.pop_back();
    }
    return fields;
}

double parse_real(const std::string& s, int line_no, const char* field) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ingest_error("manifest line " + std::to_string(line_no) + ": bad " + field + " '" +
                           s + "'");
    }
}

int parse_binary(const std::string& s, int line_no, const char* field) {
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw ingest_error("manifest line " + std::to_string(line_no) + ": " + field + " must be 0/1, got '" +
                       s + "'");
}

}  // namespace

std::vector<Sample> load_dataset(const std::string& manifest_path, int target_size) {
    std::ifstream in(manifest_path);
    if (!in) throw ingest_error(manifest_path + ": cannot open manifest");
    const fs::path base = fs::path(manifest_path).parent_path();

    std::string line;
    if (!std::getline(in, line)) return {};
    {
        const auto header = split_csv_line(line);
        std::string want;
        for (std::size_t i = 0; i < kManifestColumns.size(); ++i) {
            if (i) want += ",";
            want += kManifestColumns[i];
        }
        if (header.size() != kManifestColumns.size() ||
            !std::equal(header.begin(), header.end(), kManifestColumns.begin(),
                        [](const std::string& a, const char* b) { return a == b; })) {
            throw ingest_error("manifest line 1: header must be exactly '" + want + "'");
        }
    }

    std::vector<Sample> out;
    std::unordered_map<std::string, std::size_t> first_row;  // patient -> out index
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != kManifestColumns.size()) {
            throw ingest_error("manifest line " + std::to_string(line_no) + ": expected " +
                               std::to_string(kManifestColumns.size()) + " fields, got " +
                               std::to_string(f.size()));
        }
        Sample s;
        s.patient_id = f[0];
        if (s.patient_id.empty()) {
            throw ingest_error("manifest line " + std::to_string(line_no) + ": empty patient_id");
        }
        s.image_path = f[1];
        s.label = parse_binary(f[2], line_no, "label");
        const double crp = parse_real(f[3], line_no, "crp");
        const double esr = parse_real(f[4], line_no, "esr");
        int joint;
        if (f[5] == "hip") {
            joint = 0;
        } else if (f[5] == "knee") {
            joint = 1;
        } else {
            joint = parse_binary(f[5], line_no, "joint");
        }
        const int position = parse_binary(f[6], line_no, "position");
        const int sex = parse_binary(f[7], line_no, "sex");
        const double age = parse_real(f[8], line_no, "age");
        if (crp < 0 || esr < 0 || age < 0) {
            throw ingest_error("manifest line " + std::to_string(line_no) +
                               ": crp/esr/age must be nonnegative");
        }
        s.lab[0] = crp;
        s.lab[1] = esr;
        s.lab[2] = 2 * joint + position;
        s.lab[3] = sex;
        s.lab[4] = age;
        for (int i = 0; i < 9; ++i) s.lab[5 + i] = parse_binary(f[9 + i], line_no, kManifestColumns[9 + i]);

        auto [it, fresh] = first_row.try_emplace(s.patient_id, out.size());
        if (!fresh) {
            const Sample& prev = out[it->second];
            if (prev.lab != s.lab || prev.label != s.label) {
                throw ingest_error("manifest line " + std::to_string(line_no) + ": patient_id '" +
                                   s.patient_id + "' repeats with a different record or label");
            }
        }

        const fs::path img_path = fs::path(s.image_path).is_absolute()
                                      ? fs::path(s.image_path)
                                      : base / s.image_path;
        RawImage raw;
        try {
            raw = read_pnm(img_path.string());
        } catch (const ingest_error& e) {
            throw ingest_error("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        auto chw = to_chw(raw);
        s.image = bilinear_resize(chw, 3, raw.h, raw.w, target_size, target_size);
        s.width = target_size;
        s.height = target_size;
        out.push_back(std::move(s));
    }
    return out;
}

// ---- normalization ---------------------------------------------------------

NormStats compute_norm_stats(const std::vector<Sample>& train) {
    if (train.empty()) throw ingest_error("normalize: empty training split");
    NormStats st;
    for (const auto& s : train)
        for (int i = 0; i < kLabDim; ++i) st.mean[i] += s.lab[i];
    for (int i = 0; i < kLabDim; ++i) st.mean[i] /= static_cast<double>(train.size());
    for (const auto& s : train)
        for (int i = 0; i < kLabDim; ++i) {
            const double d = s.lab[i] - st.mean[i];
            st.stdev[i] += d * d;
        }
    for (int i = 0; i < kLabDim; ++i) {
        st.stdev[i] = std::sqrt(st.stdev[i] / static_cast<double>(train.size()));
        if (st.stdev[i] < 1e-6) st.stdev[i] = 1e-6;
    }
    return st;
}

LabVec normalize_lab(const LabVec& lab, const NormStats& st) {
    LabVec out;
    for (int i = 0; i < kLabDim; ++i) out[i] = (lab[i] - st.mean[i]) / st.stdev[i];
    return out;
}

LabVec denormalize_lab(const LabVec& norm, const NormStats& st) {
    LabVec out;
    for (int i = 0; i < kLabDim; ++i) out[i] = norm[i] * st.stdev[i] + st.mean[i];
    return out;
}

// ---- synthetic data --------------------------------------------------------

Coupling coupling_from_string(const std::string& s) {
    if (s == "xor") return Coupling::xor_both;
    if (s == "vision_only") return Coupling::vision_only;
    if (s == "numeric_only") return Coupling::numeric_only;
    throw std::invalid_argument("coupling must be xor, vision_only or numeric_only, got '" + s +
                                "'");
}

std::string to_string(Coupling c) {
    switch (c) {
        case Coupling::xor_both: return "xor";
        case Coupling::vision_only: return "vision_only";
        default: return "numeric_only";
    }
}

namespace {

// Smooth two-sinusoid background plus a bright square in the top-left (bit 0)
// or bottom-right (bit 1) quadrant, plus pixel noise. The background comes
// from a codebook of eight fixed wave pairs shared by every image, so one
// background recurs across many samples of both classes and cannot identify
// a sample or its label; only the square quadrant carries image information.
// Quantized to 8 bits so the in-memory dataset equals its on-disk round trip.
std::vector<float> render_synth_image(int size, bool square_br, Rng& rng) {
    const double base = 0.38;
    constexpr double kPi = 3.14159265358979323846;
    struct Wave {
        double amp, kx, ky, phase;
    };
    const int code = static_cast<int>(rng.below(8));
    const double a1 = kPi * code / 8.0;
    const double a2 = kPi * ((code + 3) % 8) / 8.0 + kPi / 2.0;
    const double k1 = 2.0 * kPi / (size * (0.28 + 0.025 * code));
    const double k2 = 2.0 * kPi / (size * (0.50 - 0.020 * code));
    const Wave waves[2] = {
        {0.12, k1 * std::cos(a1), k1 * std::sin(a1), 2.0 * kPi * code / 8.0},
        {0.14, k2 * std::cos(a2), k2 * std::sin(a2), 2.0 * kPi * ((code * 3) % 8) / 8.0},
    };
    const int q = size / 4;             // square spans half a quadrant, centered
    const int y0 = square_br ? size / 2 + q / 2 : q / 2;
    const int x0 = y0;
    const int side = size / 4 + size / 8;

    std::vector<float> out(static_cast<std::size_t>(3) * size * size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double v = base;
            for (const auto& wv : waves) v += wv.amp * std::sin(wv.kx * x + wv.ky * y + wv.phase);
            if (y >= y0 && y < y0 + side && x >= x0 && x < x0 + side) v += 0.25;
            v += rng.normal(0.0, 0.03);
            const int u8 = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            const float fv = static_cast<float>(u8) / 255.0f;
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            out[i] = fv;
            out[static_cast<std::size_t>(size) * size + i] = fv;
            out[2 * static_cast<std::size_t>(size) * size + i] = fv;
        }
    }
    return out;
}

const std::array<double, 9> kFlagRates = {0.3, 0.2, 0.1, 0.15, 0.1, 0.05, 0.2, 0.05, 0.1};

}  // namespace

std::vector<Sample> synth_dataset(int n, std::uint64_t seed, Coupling coupling, int size) {
    if (n < 8 || n % 2 != 0) {
        throw std::invalid_argument("synth: n must be even and >= 8, got " + std::to_string(n));
    }
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        // exact class balance: even index -> label 0, odd -> label 1; the
        // xor coupling alternates bit patterns inside each label
        const int label = i % 2;
        int b_v, b_n;
        switch (coupling) {
            case Coupling::xor_both:
                if (label == 0) {
                    b_v = (i / 2) % 2;
                    b_n = b_v;
                } else {
                    b_v = (i / 2) % 2;
                    b_n = 1 - b_v;
                }
                break;
            case Coupling::vision_only:
                b_v = label;
                b_n = -1;  // drawn below, label-independent
                break;
            default:
                b_n = label;
                b_v = -1;
                break;
        }
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0x5EED));
        if (b_v < 0) b_v = static_cast<int>(rng.below(2));
        if (b_n < 0) b_n = static_cast<int>(rng.below(2));

        Sample s;
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%04d", i);
        s.patient_id = buf;
        std::snprintf(buf, sizeof buf, "img_%04d.pgm", i);
        s.image_path = buf;
        s.label = label;
        s.width = size;
        s.height = size;

        double crp = std::abs(rng.normal(8.0, 4.0));
        double esr = std::abs(rng.normal(15.0, 6.0));
        if (b_n) {
            crp += 30.0;
            esr += 25.0;
        }
        const int joint = static_cast<int>(rng.below(2));
        const int position = static_cast<int>(rng.below(2));
        s.lab[0] = std::round(crp * 100.0) / 100.0;
        s.lab[1] = std::round(esr * 10.0) / 10.0;
        s.lab[2] = 2 * joint + position;
        s.lab[3] = static_cast<double>(rng.below(2));
        s.lab[4] = std::round(std::clamp(rng.normal(65.0, 10.0), 30.0, 95.0));
        for (int k = 0; k < 9; ++k) s.lab[5 + k] = rng.bernoulli(kFlagRates[k]) ? 1.0 : 0.0;

        s.image = render_synth_image(size, b_v == 1, rng);
        out.push_back(std::move(s));
    }
    Rng shuffle_rng(derive_seed(seed, 0xF00D));
    shuffle_rng.shuffle(out);
    return out;
}

void write_dataset(const std::string& dir, const std::vector<Sample>& samples) {
    fs::create_directories(dir);
    std::string manifest;
    for (std::size_t i = 0; i < kManifestColumns.size(); ++i) {
        if (i) manifest += ",";
        manifest += kManifestColumns[i];
    }
    manifest += "\n";
    char buf[64];
    for (const auto& s : samples) {
        const std::size_t hw = static_cast<std::size_t>(s.width) * s.height;
        std::vector<std::uint8_t> gray(hw);
        for (std::size_t i = 0; i < hw; ++i) {
            gray[i] = static_cast<std::uint8_t>(
                std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
        }
        write_pgm((fs::path(dir) / s.image_path).string(), s.width, s.height, gray);

        const int code = static_cast<int>(s.lab[2]);
        manifest += s.patient_id + "," + s.image_path + "," + std::to_string(s.label);
        std::snprintf(buf, sizeof buf, ",%.10g,%.10g,%d,%d,%d,%.10g", s.lab[0], s.lab[1],
                      code / 2, code % 2, static_cast<int>(s.lab[3]), s.lab[4]);
        manifest += buf;
        for (int k = 0; k < 9; ++k) manifest += "," + std::to_string(static_cast<int>(s.lab[5 + k]));
        manifest += "\n";
    }
    std::ofstream out(fs::path(dir) / "manifest.csv", std::ios::binary);
    if (!out) throw ingest_error(dir + ": cannot write manifest.csv");
    out << manifest;
}

// ---- splitting -------------------------------------------------------------

std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(
    const std::vector<Sample>& all, double eval_frac, std::uint64_t seed) {
    if (eval_frac < 0.0 || eval_frac >= 1.0) {
        throw std::invalid_argument("split: eval fraction must be in [0,1), got " +
                                    std::to_string(eval_frac));
    }
    // patients in first-appearance order, bucketed by label
    std::vector<std::string> patients[2];
    std::unordered_map<std::string, int> seen;
    for (const auto& s : all) {
        if (seen.insert({s.patient_id, s.label}).second) {
            patients[s.label].push_back(s.patient_id);
        }
    }
    std::unordered_map<std::string, bool> in_eval;
    for (int lbl = 0; lbl < 2; ++lbl) {
        Rng rng(derive_seed(seed, 0x5917, static_cast<std::uint64_t>(lbl)));
        auto& bucket = patients[lbl];
        rng.shuffle(bucket);
        const std::size_t k = static_cast<std::size_t>(
            std::lround(eval_frac * static_cast<double>(bucket.size())));
        for (std::size_t i = 0; i < bucket.size(); ++i) in_eval[bucket[i]] = i < k;
    }
    std::pair<std::vector<Sample>, std::vector<Sample>> out;
    for (const auto& s : all) {
        (in_eval[s.patient_id] ? out.second : out.first).push_back(s);
    }
    return out;
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamSet<float>& params, const json& config,
                     const NormStats* stats) {
    json manifest;
    manifest["format"] = "NVC1";
    manifest["config"] = config;
    if (stats) {
        manifest["norm_stats"] = {
            {"mean", std::vector<double>(stats->mean.begin(), stats->mean.end())},
            {"std", std::vector<double>(stats->stdev.begin(), stats->stdev.end())}};
    } else {
        manifest["norm_stats"] = nullptr;
    }
    json table = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        const std::uint64_t nbytes = t->numel() * sizeof(float);
        table.push_back({{"name", name},
                         {"shape", t->shape},
                         {"dtype", "f32"},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    manifest["tensors"] = std::move(table);
    const std::string mjson = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw checkpoint_error(path + ": cannot open for writing");
    out.write("NVC1", 4);
    const std::uint64_t len = mjson.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xFF);
    out.write(lenbuf, 8);
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, t] : params) {
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(float)));
    }
    if (!out) throw checkpoint_error(path + ": short write");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw checkpoint_error(path + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "NVC1", 4) != 0) {
        throw checkpoint_error(path + ": bad magic (not an NVC1 checkpoint)");
    }
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (in.gcount() != 8) throw checkpoint_error(path + ": truncated manifest length");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i)
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (len == 0 || len > (std::uint64_t(1) << 31)) {
        throw checkpoint_error(path + ": implausible manifest length " + std::to_string(len));
    }
    std::string mjson(len, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::uint64_t>(in.gcount()) != len) {
        throw checkpoint_error(path + ": truncated manifest");
    }
    json manifest;
    try {
        manifest = json::parse(mjson);
    } catch (const json::exception& e) {
        throw checkpoint_error(path + ": manifest is not valid JSON: " + e.what());
    }

    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});
    Checkpoint ck;
    ck.config = manifest.value("config", json::object());
    if (manifest.contains("norm_stats") && !manifest["norm_stats"].is_null()) {
        const auto& ns = manifest["norm_stats"];
        const auto mean = ns.at("mean").get<std::vector<double>>();
        const auto stdev = ns.at("std").get<std::vector<double>>();
        if (mean.size() != kLabDim || stdev.size() != kLabDim) {
            throw checkpoint_error(path + ": norm stats must have " + std::to_string(kLabDim) +
                                   " entries");
        }
        std::copy(mean.begin(), mean.end(), ck.stats.mean.begin());
        std::copy(stdev.begin(), stdev.end(), ck.stats.stdev.begin());
        ck.has_stats = true;
    }
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
        throw checkpoint_error(path + ": manifest has no tensor table");
    }
    for (const auto& e : manifest["tensors"]) {
        try {
            const std::string name = e.at("name").get<std::string>();
            const auto shape = e.at("shape").get<std::vector<int>>();
            const std::string dtype = e.at("dtype").get<std::string>();
            const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
            const std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
            if (dtype != "f32") throw checkpoint_error(path + ": unsupported dtype " + dtype);
            std::uint64_t numel = 1;
            for (int d : shape) {
                if (d < 1) throw checkpoint_error(path + ": bad shape for " + name);
                numel *= static_cast<std::uint64_t>(d);
            }
            if (nbytes != numel * sizeof(float) || offset + nbytes > payload.size()) {
                throw checkpoint_error(path + ": tensor " + name +
                                       " extends past the payload (offset " +
                                       std::to_string(offset) + ", nbytes " +
                                       std::to_string(nbytes) + ", payload " +
                                       std::to_string(payload.size()) + ")");
            }
            std::vector<float> data(numel);
            std::memcpy(data.data(), payload.data() + offset, nbytes);
            ck.order.push_back(name);
            ck.tensors[name] = {shape, std::move(data)};
        } catch (const json::exception& e2) {
            throw checkpoint_error(path + std::string(": malformed tensor entry: ") + e2.what());
        }
    }
    return ck;
}

std::size_t load_into(ParamSet<float>& params, const Checkpoint& ck, const std::string& prefix,
                      bool require_all) {
    std::size_t copied = 0;
    for (const auto& [name, p] : params) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) {
            if (require_all) throw checkpoint_error("checkpoint is missing tensor " + name);
            continue;
        }
        const auto& [shape, data] = it->second;
        if (shape != p->shape) {
            throw checkpoint_error("tensor " + name + " has shape " + shape_str(shape) +
                                   " in the checkpoint but " + shape_str(p->shape) +
                                   " in the model");
        }
        p->data = data;
        ++copied;
    }
    return copied;
}

}  // namespace mednvc
