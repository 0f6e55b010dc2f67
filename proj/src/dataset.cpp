#include "elytra/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "elytra/error.hpp"
#include "elytra/rng.hpp"

namespace elytra {

namespace fs = std::filesystem;

namespace {

enum class Silhouette { circle, square, diamond, octagon, triangle_up, triangle_down, rectangle };
enum class Glyph { none, hbar, vbar, cross, slash, dots, arrow_up, arrow_left, arrow_right, letter_p, ring, pair,
                   block, turn, dot };

struct Rgb {
    float r, g, b;
};

constexpr Rgb kRed{0.80f, 0.10f, 0.12f};
constexpr Rgb kWhite{0.95f, 0.95f, 0.95f};
constexpr Rgb kBlue{0.10f, 0.30f, 0.80f};
constexpr Rgb kYellow{0.95f, 0.80f, 0.10f};
constexpr Rgb kBlack{0.05f, 0.05f, 0.05f};
constexpr Rgb kGreen{0.10f, 0.55f, 0.25f};
constexpr Rgb kOrange{0.95f, 0.50f, 0.10f};

struct ClassDesign {
    const char *name;
    Silhouette shape;
    Rgb fill;
    Rgb border;
    Glyph glyph;
    Rgb ink;
};

// The first eight are the default class set and differ in at least two of
// silhouette, colour and glyph. The last three are placeholders.
constexpr std::array<ClassDesign, kMaxClasses> kDesigns{{
    {"stop", Silhouette::octagon, kRed, kWhite, Glyph::hbar, kWhite},
    {"priority_road", Silhouette::diamond, kYellow, kWhite, Glyph::none, kWhite},
    {"curve", Silhouette::triangle_up, kWhite, kRed, Glyph::slash, kBlack},
    {"keep_right", Silhouette::circle, kBlue, kWhite, Glyph::arrow_right, kWhite},
    {"parking", Silhouette::square, kBlue, kWhite, Glyph::letter_p, kWhite},
    {"no_parking", Silhouette::circle, kBlue, kRed, Glyph::slash, kRed},
    {"speed_limit", Silhouette::circle, kWhite, kRed, Glyph::dots, kBlack},
    {"ahead_only", Silhouette::circle, kBlue, kWhite, Glyph::arrow_up, kWhite},
    {"no_entry", Silhouette::circle, kRed, kRed, Glyph::hbar, kWhite},
    {"keep_left", Silhouette::circle, kBlue, kWhite, Glyph::arrow_left, kWhite},
    {"no_stopping", Silhouette::circle, kBlue, kRed, Glyph::cross, kRed},
    {"no_overtaking", Silhouette::circle, kWhite, kRed, Glyph::pair, kBlack},
    {"goods_vehicles", Silhouette::circle, kWhite, kRed, Glyph::block, kBlack},
    {"no_left_turn", Silhouette::circle, kWhite, kRed, Glyph::arrow_left, kBlack},
    {"no_right_turn", Silhouette::circle, kWhite, kRed, Glyph::arrow_right, kBlack},
    {"no_u_turn", Silhouette::circle, kWhite, kRed, Glyph::ring, kBlack},
    {"roundabout", Silhouette::circle, kBlue, kWhite, Glyph::ring, kWhite},
    {"turn_left", Silhouette::circle, kBlue, kWhite, Glyph::turn, kWhite},
    {"placeholder_a", Silhouette::triangle_down, kWhite, kRed, Glyph::none, kBlack},
    {"placeholder_b", Silhouette::rectangle, kGreen, kWhite, Glyph::hbar, kWhite},
    {"placeholder_c", Silhouette::diamond, kOrange, kBlack, Glyph::dot, kBlack},
}};

bool inside(Silhouette s, float u, float v) {
    const float au = std::fabs(u), av = std::fabs(v);
    switch (s) {
    case Silhouette::circle:
        return u * u + v * v <= 1.0f;
    case Silhouette::square:
        return std::max(au, av) <= 0.85f;
    case Silhouette::diamond:
        return au + av <= 1.0f;
    case Silhouette::octagon:
        return std::max(au, av) <= 0.92f && au + av <= 1.3f;
    case Silhouette::triangle_up:
        return v <= 0.7f && v >= -1.0f && au <= 0.95f * (v + 1.0f) / 1.7f;
    case Silhouette::triangle_down:
        return v >= -0.7f && v <= 1.0f && au <= 0.95f * (1.0f - v) / 1.7f;
    case Silhouette::rectangle:
        return au <= 0.6f && av <= 0.95f;
    }
    return false;
}

bool on_glyph(Glyph g, float u, float v) {
    const float au = std::fabs(u), av = std::fabs(v);
    const auto disc = [&](float cu, float cv, float r) { return (u - cu) * (u - cu) + (v - cv) * (v - cv) <= r * r; };
    switch (g) {
    case Glyph::none:
        return false;
    case Glyph::hbar:
        return av <= 0.18f && au <= 0.6f;
    case Glyph::vbar:
        return au <= 0.15f && av <= 0.6f;
    case Glyph::cross:
        return (std::fabs(u - v) <= 0.2f || std::fabs(u + v) <= 0.2f) && u * u + v * v <= 0.55f;
    case Glyph::slash:
        return std::fabs(u + v) <= 0.2f && au <= 0.6f;
    case Glyph::dots:
        return disc(-0.3f, 0.0f, 0.22f) || disc(0.3f, 0.0f, 0.22f);
    case Glyph::arrow_up:
        return (au <= 0.13f && v >= -0.2f && v <= 0.6f) || (v >= -0.6f && v < -0.2f && au <= (v + 0.6f));
    case Glyph::arrow_left:
        return (av <= 0.13f && u >= -0.2f && u <= 0.6f) || (u >= -0.6f && u < -0.2f && av <= (u + 0.6f));
    case Glyph::arrow_right:
        return (av <= 0.13f && u <= 0.2f && u >= -0.6f) || (u <= 0.6f && u > 0.2f && av <= (0.6f - u));
    case Glyph::letter_p:
        return (u >= -0.35f && u <= -0.1f && av <= 0.6f) ||
               (u >= -0.1f && u <= 0.4f && v >= -0.6f && v <= 0.05f && !(u < 0.2f && v > -0.4f && v < -0.15f));
    case Glyph::ring: {
        const float r2 = u * u + v * v;
        return r2 >= 0.3f * 0.3f && r2 <= 0.52f * 0.52f;
    }
    case Glyph::pair:
        return (std::fabs(u + 0.25f) <= 0.12f || std::fabs(u - 0.25f) <= 0.12f) && av <= 0.55f;
    case Glyph::block:
        return au <= 0.5f && v >= -0.25f && v <= 0.3f;
    case Glyph::turn:
        return (au <= 0.13f && v >= -0.1f && v <= 0.6f) || (av <= 0.13f && u >= -0.6f && u <= 0.13f && v <= 0.13f);
    case Glyph::dot:
        return disc(0.0f, 0.0f, 0.25f);
    }
    return false;
}

/// Colour at sign-local (u, v); returns false outside the silhouette.
bool sign_colour(const ClassDesign &d, float u, float v, Rgb &out) {
    if (!inside(d.shape, u, v)) return false;
    constexpr float kInner = 0.78f;
    if (!inside(d.shape, u / kInner, v / kInner)) {
        out = d.border;
    } else if (on_glyph(d.glyph, u / kInner, v / kInner)) {
        out = d.ink;
    } else {
        out = d.fill;
    }
    return true;
}

void render(const ClassDesign &d, std::size_t size, Rng &rng, float *dst) {
    const float half = static_cast<float>(size) / 2.0f;
    const float scale = rng.uniform(0.72f, 0.95f) * half;
    const float angle = rng.uniform(-12.0f, 12.0f) * std::numbers::pi_v<float> / 180.0f;
    const float cx = half + rng.uniform(-0.12f, 0.12f) * half, cy = half + rng.uniform(-0.12f, 0.12f) * half;
    const float brightness = rng.uniform(0.75f, 1.15f);
    // Haze: the sign is blended toward the background by a random contrast.
    const float contrast = rng.uniform(0.5f, 0.8f);
    const Rgb bg{rng.uniform(0.15f, 0.85f), rng.uniform(0.15f, 0.85f), rng.uniform(0.15f, 0.85f)};
    const float grad_u = rng.uniform(-0.15f, 0.15f), grad_v = rng.uniform(-0.15f, 0.15f);
    const float ca = std::cos(angle), sa = std::sin(angle);
    const std::size_t plane = size * size;
    constexpr int kSuper = 2;

    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const float ny = static_cast<float>(y) / static_cast<float>(size) - 0.5f;
            const float nx = static_cast<float>(x) / static_cast<float>(size) - 0.5f;
            const float shade = 1.0f + grad_u * nx + grad_v * ny;
            float acc[3] = {0.0f, 0.0f, 0.0f};
            int on_sign = 0;
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    const float py = static_cast<float>(y) + (static_cast<float>(sy) + 0.5f) / kSuper - cy;
                    const float px = static_cast<float>(x) + (static_cast<float>(sx) + 0.5f) / kSuper - cx;
                    const float u = (ca * px + sa * py) / scale, v = (-sa * px + ca * py) / scale;
                    Rgb c;
                    if (sign_colour(d, u, v, c)) {
                        const Rgb h{bg.r * shade, bg.g * shade, bg.b * shade};
                        c = {h.r + contrast * (c.r * brightness - h.r), h.g + contrast * (c.g * brightness - h.g),
                             h.b + contrast * (c.b * brightness - h.b)};
                        ++on_sign;
                    } else {
                        c = {bg.r * shade, bg.g * shade, bg.b * shade};
                    }
                    acc[0] += c.r;
                    acc[1] += c.g;
                    acc[2] += c.b;
                }
            }
            for (std::size_t ch = 0; ch < 3; ++ch) {
                // Noise is confined to the background; the share of sign coverage fades it out.
                const float bg_share = 1.0f - static_cast<float>(on_sign) / (kSuper * kSuper);
                const float noise = static_cast<float>(rng.normal()) * 0.04f * bg_share;
                const float val = acc[ch] / (kSuper * kSuper) + noise;
                dst[ch * plane + y * size + x] = std::clamp(val, 0.0f, 1.0f);
            }
        }
    }
}

} // namespace

std::string_view split_name(Split split) {
    switch (split) {
    case Split::train:
        return "train";
    case Split::val:
        return "val";
    case Split::test:
        return "test";
    }
    throw LookupError("unknown split");
}

Split split_from_name(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw LookupError("unknown split '" + std::string(name) + "'");
}

void DatasetConfig::validate() const {
    if (classes < 2 || classes > kMaxClasses) {
        throw ConfigError("class count must lie in [2, " + std::to_string(kMaxClasses) + "], got " +
                          std::to_string(classes));
    }
    if (per_class < 10) throw ConfigError("need at least 10 samples per class, got " + std::to_string(per_class));
    if (image_size < 8) throw ConfigError("image size must be at least 8 px");
    double total = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be non-negative");
        total += r;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

Json DatasetConfig::to_json() const {
    return Json{{"classes", classes}, {"per_class", per_class}, {"image_size", image_size}, {"seed", seed},
                {"ratios", ratios}};
}

DatasetConfig DatasetConfig::from_json(const Json &j) {
    DatasetConfig c;
    c.classes = j.value("classes", c.classes);
    c.per_class = j.value("per_class", c.per_class);
    c.image_size = j.value("image_size", c.image_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ratios")) c.ratios = j.at("ratios").get<std::array<double, 3>>();
    c.validate();
    return c;
}

std::vector<std::string> class_names(std::size_t classes) {
    if (classes > kMaxClasses) throw ConfigError("at most " + std::to_string(kMaxClasses) + " classes are designed");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < classes; ++i) out.emplace_back(kDesigns[i].name);
    return out;
}

std::vector<std::size_t> Dataset::split_ids(Split split) const {
    std::vector<std::size_t> ids;
    for (const auto &r : records) {
        if (r.split == split) ids.push_back(r.id);
    }
    return ids;
}

std::size_t Dataset::split_count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const SampleRecord &r) { return r.split == split; }));
}

Tensor Dataset::split_images(Split split) const {
    const std::vector<std::size_t> ids = split_ids(split);
    if (ids.empty()) throw ContractError("split '" + std::string(split_name(split)) + "' is empty");
    const std::size_t per = images.numel() / images.dim(0);
    Tensor out(Shape{ids.size(), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(images.data() + records[ids[i]].offset, per, out.data() + i * per);
    }
    return out;
}

std::vector<int> Dataset::split_labels(Split split) const {
    std::vector<int> out;
    for (const auto &r : records) {
        if (r.split == split) out.push_back(r.label);
    }
    return out;
}

std::string Dataset::content_hash() const { return sha256_hex(splits_csv(*this) + sha256_floats(images.values())); }

Dataset generate(const DatasetConfig &cfg) {
    cfg.validate();
    const std::size_t n = cfg.classes * cfg.per_class, s = cfg.image_size, per = 3 * s * s;
    Dataset ds{cfg, class_names(cfg.classes), {}, Tensor(Shape{n, 3, s, s})};
    ds.records.reserve(n);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        for (std::size_t j = 0; j < cfg.per_class; ++j) {
            const std::size_t id = c * cfg.per_class + j;
            Rng rng(derive_seed(cfg.seed, c, j));
            render(kDesigns[c], s, rng, ds.images.data() + id * per);
            ds.records.push_back(SampleRecord{id, static_cast<int>(c), Split::train, id * per});
        }
    }
    stratified_split(ds, cfg.ratios, derive_seed(cfg.seed, 0x5b117));
    return ds;
}

void stratified_split(Dataset &ds, const std::array<double, 3> &ratios, std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be non-negative");
        total += r;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1 within 1e-9");
    std::vector<std::vector<std::size_t>> by_class(ds.names.size());
    for (const auto &r : ds.records) by_class.at(static_cast<std::size_t>(r.label)).push_back(r.id);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto &ids = by_class[c];
        Rng rng(derive_seed(seed, c));
        for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
        const double m = static_cast<double>(ids.size());
        const auto n_train = std::min(ids.size(), static_cast<std::size_t>(std::llround(ratios[0] * m)));
        const auto n_val = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * m)));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ds.records[ids[i]].split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
        }
    }
}

std::string splits_csv(const Dataset &ds) {
    std::ostringstream out;
    out << "class,image_source,dataset\n";
    for (const auto &r : ds.records) {
        out << ds.names[static_cast<std::size_t>(r.label)] << ",data.f32#" << r.id << ',' << split_name(r.split)
            << '\n';
    }
    return out.str();
}

std::vector<Split> parse_splits_csv(const std::string &csv, std::size_t expected_rows) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "class,image_source,dataset") {
        throw FormatError("splits.csv has a missing or unexpected header");
    }
    std::vector<Split> tags(expected_rows);
    std::vector<bool> seen(expected_rows, false);
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(','), c2 = line.rfind(',');
        const auto hash = line.find('#');
        if (c1 == std::string::npos || c1 == c2 || hash == std::string::npos || hash > c2) {
            throw FormatError("malformed splits.csv row: " + line);
        }
        const std::size_t id = std::stoull(line.substr(hash + 1, c2 - hash - 1));
        if (id >= expected_rows || seen[id]) {
            throw FormatError("splits.csv lists sample " + std::to_string(id) + " twice or out of range");
        }
        seen[id] = true;
        tags[id] = split_from_name(line.substr(c2 + 1));
        ++rows;
    }
    if (rows != expected_rows) {
        throw FormatError("splits.csv has " + std::to_string(rows) + " rows, expected " + std::to_string(expected_rows));
    }
    return tags;
}

void save_dataset(const fs::path &dir, const Dataset &ds) {
    fs::create_directories(dir);
    Json records = Json::array();
    for (const auto &r : ds.records) {
        records.push_back(Json{{"id", r.id}, {"label", r.label}, {"split", split_name(r.split)}, {"offset", r.offset}});
    }
    Json counts;
    for (Split s : {Split::train, Split::val, Split::test}) counts[std::string(split_name(s))] = ds.split_count(s);
    write_f32_blob(dir / "data.f32", ds.images.values());
    write_text(dir / "splits.csv", splits_csv(ds));
    write_json(dir / "manifest.json", Json{{"format", "elytra-dataset/1"},
                                           {"config", ds.config.to_json()},
                                           {"class_names", ds.names},
                                           {"image_shape", {3, ds.config.image_size, ds.config.image_size}},
                                           {"blob", "data.f32"},
                                           {"blob_floats", ds.images.numel()},
                                           {"counts", counts},
                                           {"records", records},
                                           {"content_hash", ds.content_hash()}});
}

Dataset load_dataset(const fs::path &dir) {
    if (!fs::exists(dir / "manifest.json")) {
        throw MissingArtifactError("no dataset at " + dir.string() + " (run gen-data)");
    }
    const Json doc = read_json(dir / "manifest.json");
    Dataset ds;
    ds.config = DatasetConfig::from_json(doc.at("config"));
    ds.names = doc.at("class_names").get<std::vector<std::string>>();
    std::vector<float> blob = read_f32_blob(dir / doc.at("blob").get<std::string>());
    if (blob.size() != doc.at("blob_floats").get<std::size_t>()) {
        throw FormatError("dataset blob holds " + std::to_string(blob.size()) + " floats, manifest expects " +
                          std::to_string(doc.at("blob_floats").get<std::size_t>()));
    }
    const std::size_t s = ds.config.image_size, per = 3 * s * s;
    const auto &recs = doc.at("records");
    std::set<std::size_t> ids;
    for (const auto &r : recs) {
        SampleRecord rec{r.at("id").get<std::size_t>(), r.at("label").get<int>(),
                         split_from_name(r.at("split").get<std::string>()), r.at("offset").get<std::size_t>()};
        if (rec.offset + per > blob.size()) {
            throw FormatError("record " + std::to_string(rec.id) + " has offset past end of blob");
        }
        if (rec.label < 0 || static_cast<std::size_t>(rec.label) >= ds.names.size()) {
            throw FormatError("record " + std::to_string(rec.id) + " has an out-of-range label");
        }
        // A sample id occurring twice would sit in two splits.
        if (!ids.insert(rec.id).second || rec.id != ds.records.size()) {
            throw FormatError("split leakage or misordered ids at sample " + std::to_string(rec.id));
        }
        ds.records.push_back(rec);
    }
    if (blob.size() != ds.records.size() * per) throw FormatError("blob length does not match record count");
    ds.images = Tensor(Shape{ds.records.size(), 3, s, s}, std::move(blob));
    const std::vector<Split> csv_tags = parse_splits_csv(read_text(dir / "splits.csv"), ds.records.size());
    for (const auto &r : ds.records) {
        if (csv_tags[r.id] != r.split) {
            throw FormatError("splits.csv disagrees with manifest for sample " + std::to_string(r.id));
        }
    }
    if (ds.content_hash() != doc.at("content_hash").get<std::string>()) {
        throw FormatError("dataset content hash mismatch in " + dir.string());
    }
    return ds;
}

} // namespace elytra
