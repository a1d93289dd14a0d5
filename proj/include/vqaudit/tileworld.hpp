#ifndef VQAUDIT_TILEWORLD_HPP
#define VQAUDIT_TILEWORLD_HPP

#include "errors.hpp"
#include "image.hpp"
#include "rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

/// Synthetic top-down tile world with pixel-exact ground-truth entity masks.
namespace vqa::tileworld {

inline constexpr std::size_t kCell = 8;
inline constexpr int kPaletteVersion = 1;

/// Entity ids double as mask values. Ids below kTileTypeCount are tile types.
enum Entity : std::uint8_t {
    grass = 0,
    water = 1,
    stone = 2,
    tree = 3,
    sand = 4,
    coal = 5,
    spawn = 6,
    agent = 7,
    digit0 = 8,
    hud = 18,
};

inline constexpr std::size_t kTileTypeCount = 7;
inline constexpr std::size_t kTerrainTypeCount = 6; // tile types drawn at random (all but spawn)
inline constexpr std::size_t kEntityCount = 19;
inline constexpr std::size_t kItemCount = 3; // wood, coal, sand

inline constexpr std::array<std::string_view, kEntityCount> kEntityNames = {
    "grass", "water",  "stone",  "tree",   "sand",   "coal",   "spawn",  "agent",  "digit0", "digit1",
    "digit2", "digit3", "digit4", "digit5", "digit6", "digit7", "digit8", "digit9", "hud"};

inline constexpr std::array<double, kTerrainTypeCount> kDefaultTerrainWeights = {0.45, 0.12, 0.12, 0.13, 0.10, 0.08};

/// Display colors for the palette-indexed mask files.
inline constexpr std::array<Rgb, kEntityCount> kMaskPalette = {{
    {86, 168, 64},   {50, 100, 200},  {128, 128, 128}, {30, 100, 30},   {220, 200, 130},
    {25, 25, 25},    {240, 220, 40},  {200, 40, 40},   {255, 255, 255}, {230, 230, 230},
    {205, 205, 205}, {180, 180, 180}, {155, 155, 155}, {130, 130, 130}, {105, 105, 105},
    {80, 80, 80},    {55, 55, 55},    {30, 30, 30},    {40, 40, 40},
}};

inline bool walkable(std::uint8_t tile) { return tile != water && tile != stone; }

struct Position {
    int row = 0;
    int col = 0;
    friend bool operator==(const Position&, const Position&) = default;
};

using HudState = std::array<std::uint8_t, kItemCount>;

struct TileGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> tiles;

    TileGrid() = default;
    TileGrid(std::size_t r, std::size_t c, std::uint8_t fill = grass)
        : rows(r)
        , cols(c)
        , tiles(r * c, fill)
    {
    }

    std::uint8_t& at(std::size_t r, std::size_t c) { return tiles[r * cols + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return tiles[r * cols + c]; }
    std::uint8_t at(Position p) const { return at(static_cast<std::size_t>(p.row), static_cast<std::size_t>(p.col)); }
    bool contains(Position p) const
    {
        return p.row >= 0 && p.col >= 0 && static_cast<std::size_t>(p.row) < rows
               && static_cast<std::size_t>(p.col) < cols;
    }

    std::optional<Position> spawn_position() const
    {
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            if (tiles[i] == spawn) {
                return Position{static_cast<int>(i / cols), static_cast<int>(i % cols)};
            }
        }
        return std::nullopt;
    }

    friend bool operator==(const TileGrid&, const TileGrid&) = default;
};

/// Throws unless every id is a tile type and there is exactly one spawn tile.
inline void validate(const TileGrid& grid)
{
    if (grid.rows == 0 || grid.cols == 0 || grid.tiles.size() != grid.rows * grid.cols) {
        throw ConfigError("tile grid has zero area or inconsistent storage");
    }
    std::size_t spawns = 0;
    for (auto t : grid.tiles) {
        if (t >= kTileTypeCount) {
            throw ConfigError("tile id " + std::to_string(t) + " outside the palette");
        }
        spawns += t == spawn;
    }
    if (spawns != 1) {
        throw ConfigError("tile grid must contain exactly one spawn tile, found " + std::to_string(spawns));
    }
}

struct Observation {
    RgbImage frame;
    LabelImage mask;
    HudState hud{};
    Position agent;
};

enum class Action : std::uint8_t { stay = 0, up = 1, down = 2, left = 3, right = 4 };
inline constexpr std::size_t kActionCount = 5;

struct EpisodeLog {
    std::size_t id = 0;
    TileGrid grid;
    std::vector<Observation> observations; // steps + 1 entries; step t maps observations[t] -> [t + 1]
    std::vector<Action> actions;

    std::size_t steps() const { return actions.size(); }
};

// --- sprites -----------------------------------------------------------------------------------

namespace sprites {

struct Sprite {
    std::array<std::string_view, kCell> rows;
    std::string_view legend;            // characters
    std::array<Rgb, 8> colors;          // color for legend[i]
};

inline constexpr Rgb kGrass{86, 168, 64}, kGrassDark{60, 130, 45}, kGrassLight{120, 200, 80};
inline constexpr Rgb kStone{128, 128, 128}, kStoneDark{96, 96, 96}, kStoneLight{160, 160, 160};
inline constexpr Rgb kHudBg{40, 40, 40}, kGlyph{240, 240, 240};

inline constexpr std::array<Sprite, kTileTypeCount> kTiles = {{
    {{"GGGGGGGG", "GgGGGGlG", "GGGGgGGG", "GGlGGGGG", "GGGGGGgG", "GgGGlGGG", "GGGGGGGG", "GGGgGGlG"},
     "Ggl",
     {kGrass, kGrassDark, kGrassLight}},
    {{"WWWWWWWW", "WwwWWWWW", "WWWwwWWW", "WWWWWWWd", "WWWWwwWW", "wwWWWWww", "WWWWWWWW", "WdWWwwWW"},
     "Wwd",
     {Rgb{50, 100, 200}, Rgb{80, 140, 230}, Rgb{30, 70, 160}}},
    {{"SSSShSSS", "SsSSSSSS", "SSsSSSsS", "SSSsSSsS", "hSSSSsSS", "SSSSSSSh", "SsSSSSSS", "SSShSsSS"},
     "Ssh",
     {kStone, kStoneDark, kStoneLight}},
    {{"GGTTTTGG", "GTTtTTTG", "TTtTTtTT", "TTTTTTTT", "GTTtTTTG", "GGTBBTGG", "GGGBBGGG", "GGGBBGGG"},
     "GTtB",
     {kGrass, Rgb{30, 100, 30}, Rgb{50, 130, 40}, Rgb{110, 70, 30}}},
    {{"YYYYYYYY", "YyYYYoYY", "YYYYYYYy", "YoYYyYYY", "YYYYYYYY", "YYyYYYoY", "YYYYoYYY", "YyYYYYYY"},
     "Yyo",
     {Rgb{220, 200, 130}, Rgb{200, 180, 110}, Rgb{235, 220, 160}}},
    {{"SSSSSSSS", "SKKSSSSS", "SKKSSKSS", "SSSSKKKS", "SSSSSKSS", "SKSSSSSS", "SKKSSKKS", "SSSSSKSS"},
     "SK",
     {kStone, Rgb{25, 25, 25}}},
    {{"GGGGGGGG", "GXXXXXXG", "GXGGGGXG", "GXGGGGXG", "GXGGGGXG", "GXGGGGXG", "GXXXXXXG", "GGGGGGGG"},
     "GX",
     {kGrass, Rgb{240, 220, 40}}},
}};

/// '.' is transparent.
inline constexpr Sprite kAgent = {
    {"..FFFF..", "..FFFF..", ".AAAAAA.", "A.AAAA.A", "..AAAA..", "..PPPP..", "..P..P..", ".PP..PP."},
    "AFP",
    {Rgb{200, 40, 40}, Rgb{250, 200, 160}, Rgb{40, 40, 120}}};

/// HUD item icons for wood, coal and sand; '.' shows the HUD background.
inline constexpr std::array<Sprite, kItemCount> kItemIcons = {{
    {{"........", "........", ".BBBBBB.", ".BbBBbB.", ".BBBBBB.", ".BbBBbB.", "........", "........"},
     "Bb",
     {Rgb{130, 85, 40}, Rgb{90, 55, 25}}},
    {{"........", "...KK...", "..KKKK..", ".KKKKKK.", ".KKKKKK.", "..KKKK..", "........", "........"},
     "K",
     {Rgb{10, 10, 10}}},
    {{"........", "........", "...YY...", "..YYYY..", ".YYYYYY.", "YYYYYYYY", "........", "........"},
     "Y",
     {Rgb{220, 200, 130}}},
}};

/// 4x6 digit glyphs placed at rows 1..6, cols 2..5 of a HUD cell. The hooked 9 keeps the ten
/// glyphs linearly independent of each other and of the blank cell.
inline constexpr std::array<std::array<std::string_view, 6>, 10> kDigits = {{
    {"####", "#..#", "#..#", "#..#", "#..#", "####"},
    {"..#.", ".##.", "..#.", "..#.", "..#.", ".###"},
    {"####", "...#", "####", "#...", "#...", "####"},
    {"####", "...#", ".###", "...#", "...#", "####"},
    {"#..#", "#..#", "####", "...#", "...#", "...#"},
    {"####", "#...", "####", "...#", "...#", "####"},
    {"####", "#...", "####", "#..#", "#..#", "####"},
    {"####", "...#", "..#.", ".#..", ".#..", ".#.."},
    {"####", "#..#", "####", "#..#", "#..#", "####"},
    {"####", "#..#", "####", "...#", "..#.", ".#.."},
}};

inline std::optional<Rgb> color_of(const Sprite& s, std::size_t y, std::size_t x)
{
    const char ch = s.rows[y][x];
    const auto i = s.legend.find(ch);
    if (i == std::string_view::npos) {
        return std::nullopt;
    }
    return s.colors[i];
}

} // namespace sprites

/// Paint the 8x8 cell at (cell_row, cell_col).
inline void paint_tile(Observation& obs, std::size_t cell_row, std::size_t cell_col, std::uint8_t tile)
{
    const auto& s = sprites::kTiles.at(tile);
    for (std::size_t y = 0; y < kCell; ++y) {
        for (std::size_t x = 0; x < kCell; ++x) {
            const std::size_t py = cell_row * kCell + y;
            const std::size_t px = cell_col * kCell + x;
            const Rgb c = *sprites::color_of(s, y, x);
            for (std::size_t k = 0; k < 3; ++k) {
                obs.frame.at(py, px, k) = c[k];
            }
            obs.mask.at(py, px) = tile;
        }
    }
}

inline void paint_agent(Observation& obs, Position p)
{
    for (std::size_t y = 0; y < kCell; ++y) {
        for (std::size_t x = 0; x < kCell; ++x) {
            const auto c = sprites::color_of(sprites::kAgent, y, x);
            if (!c) {
                continue;
            }
            const std::size_t py = static_cast<std::size_t>(p.row) * kCell + y;
            const std::size_t px = static_cast<std::size_t>(p.col) * kCell + x;
            for (std::size_t k = 0; k < 3; ++k) {
                obs.frame.at(py, px, k) = (*c)[k];
            }
            obs.mask.at(py, px) = agent;
        }
    }
}

/// HUD cell content: an item icon, a digit, or blank background.
struct HudCell {
    enum class Kind { blank, icon, digit } kind = Kind::blank;
    std::size_t value = 0;
};

inline HudCell hud_cell(const HudState& hud, std::size_t col)
{
    const std::size_t slot = col / 2;
    if (slot >= kItemCount) {
        return {};
    }
    if (col % 2 == 0) {
        return {HudCell::Kind::icon, slot};
    }
    return {HudCell::Kind::digit, std::min<std::size_t>(hud[slot], 9)};
}

inline void paint_hud_cell(Observation& obs, std::size_t cell_row, std::size_t cell_col, HudCell cell)
{
    for (std::size_t y = 0; y < kCell; ++y) {
        for (std::size_t x = 0; x < kCell; ++x) {
            Rgb c = sprites::kHudBg;
            std::uint8_t id = hud;
            if (cell.kind == HudCell::Kind::icon) {
                if (auto ic = sprites::color_of(sprites::kItemIcons[cell.value], y, x)) {
                    c = *ic;
                }
            } else if (cell.kind == HudCell::Kind::digit && y >= 1 && y <= 6 && x >= 2 && x <= 5
                       && sprites::kDigits[cell.value][y - 1][x - 2] == '#') {
                c = sprites::kGlyph;
                id = static_cast<std::uint8_t>(digit0 + cell.value);
            }
            const std::size_t py = cell_row * kCell + y;
            const std::size_t px = cell_col * kCell + x;
            for (std::size_t k = 0; k < 3; ++k) {
                obs.frame.at(py, px, k) = c[k];
            }
            obs.mask.at(py, px) = id;
        }
    }
}

/// Frame of (rows + 1) x cols cells: the world on top and one HUD row below.
inline Observation render(const TileGrid& grid, std::optional<Position> agent_pos, const HudState& hud_state)
{
    if (grid.rows == 0 || grid.cols == 0) {
        throw ConfigError("cannot render a zero-area grid");
    }
    Observation obs;
    obs.frame = RgbImage(grid.cols * kCell, (grid.rows + 1) * kCell);
    obs.mask = LabelImage(grid.cols * kCell, (grid.rows + 1) * kCell);
    obs.hud = hud_state;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            const auto tile = grid.at(r, c);
            if (tile >= kTileTypeCount) {
                throw ConfigError("tile id " + std::to_string(tile) + " outside the palette");
            }
            paint_tile(obs, r, c, tile);
        }
    }
    if (agent_pos) {
        if (!grid.contains(*agent_pos)) {
            throw ConfigError("agent position outside the grid");
        }
        paint_agent(obs, *agent_pos);
        obs.agent = *agent_pos;
    }
    for (std::size_t c = 0; c < grid.cols; ++c) {
        paint_hud_cell(obs, grid.rows, c, hud_cell(hud_state, c));
    }
    return obs;
}

/// Draws terrain from `terrain_weights` (grass, water, stone, tree, sand, coal) and then turns one
/// uniformly chosen walkable cell into the spawn tile.
inline TileGrid generate_world(std::uint64_t seed, std::size_t rows, std::size_t cols,
                               std::span<const double> terrain_weights = kDefaultTerrainWeights)
{
    if (rows == 0 || cols == 0) {
        throw ConfigError("world must have positive rows and cols");
    }
    if (terrain_weights.size() != kTerrainTypeCount) {
        throw ConfigError("expected " + std::to_string(kTerrainTypeCount) + " terrain weights");
    }
    double total = 0.0;
    for (double w : terrain_weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ConfigError("terrain weights must be finite and nonnegative");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw ConfigError("terrain weights are all zero");
    }
    Rng rng(seed);
    TileGrid grid(rows, cols);
    for (auto& t : grid.tiles) {
        double u = rng.uniform() * total;
        std::size_t k = 0;
        while (k + 1 < kTerrainTypeCount && (u >= terrain_weights[k] || terrain_weights[k] == 0.0)) {
            u -= terrain_weights[k];
            ++k;
        }
        while (terrain_weights[k] == 0.0) {
            --k;
        }
        t = static_cast<std::uint8_t>(k);
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < grid.tiles.size(); ++i) {
        if (walkable(grid.tiles[i])) {
            candidates.push_back(i);
        }
    }
    const std::size_t at = candidates.empty() ? static_cast<std::size_t>(rng.below(grid.tiles.size()))
                                              : candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
    grid.tiles[at] = spawn;
    return grid;
}

struct AgentState {
    Position position;
    HudState hud{};
    friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// One move. Out-of-bounds and blocked targets leave the agent in place; entering a tree,
/// coal or sand tile increments the matching counter (capped at 9).
inline AgentState apply_action(const TileGrid& grid, AgentState s, Action a)
{
    Position next = s.position;
    switch (a) {
    case Action::stay:
        return s;
    case Action::up:
        --next.row;
        break;
    case Action::down:
        ++next.row;
        break;
    case Action::left:
        --next.col;
        break;
    case Action::right:
        ++next.col;
        break;
    }
    if (!grid.contains(next) || !walkable(grid.at(next))) {
        return s;
    }
    s.position = next;
    const auto tile = grid.at(next);
    const int item = tile == tree ? 0 : tile == coal ? 1 : tile == sand ? 2 : -1;
    if (item >= 0 && s.hud[static_cast<std::size_t>(item)] < 9) {
        ++s.hud[static_cast<std::size_t>(item)];
    }
    return s;
}

/// Random-walk rollout starting on the spawn tile.
inline EpisodeLog rollout(const TileGrid& grid, std::uint64_t seed, std::size_t steps, std::size_t episode_id = 0)
{
    if (steps == 0) {
        throw ConfigError("rollout needs at least one step");
    }
    validate(grid);
    Rng rng(seed);
    EpisodeLog log;
    log.id = episode_id;
    log.grid = grid;
    AgentState state{*grid.spawn_position(), {}};
    log.observations.push_back(render(grid, state.position, state.hud));
    for (std::size_t t = 0; t < steps; ++t) {
        const auto a = static_cast<Action>(rng.below(kActionCount));
        state = apply_action(grid, state, a);
        log.actions.push_back(a);
        log.observations.push_back(render(grid, state.position, state.hud));
    }
    return log;
}

// --- datasets ----------------------------------------------------------------------------------

struct DatasetConfig {
    std::uint64_t seed = 0;
    std::size_t episodes = 200;
    std::size_t steps = 100;
    std::size_t rows = 7;
    std::size_t cols = 8;
    std::array<double, kTerrainTypeCount> terrain_weights = kDefaultTerrainWeights;
};

inline std::vector<EpisodeLog> generate_episodes(const DatasetConfig& cfg)
{
    std::vector<EpisodeLog> episodes;
    episodes.reserve(cfg.episodes);
    for (std::size_t e = 0; e < cfg.episodes; ++e) {
        const TileGrid grid = generate_world(derive_seed(cfg.seed, 2 * e), cfg.rows, cfg.cols, cfg.terrain_weights);
        episodes.push_back(rollout(grid, derive_seed(cfg.seed, 2 * e + 1), cfg.steps, e));
    }
    return episodes;
}

struct FileEntry {
    std::string path;
    std::uintmax_t bytes = 0;
    std::string crc32;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::size_t episodes = 0;
    std::size_t steps_per_episode = 0;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    std::size_t transitions = 0;
    int palette_version = kPaletteVersion;
    std::string rng = kRngName;
    std::array<double, kTerrainTypeCount> terrain_weights{};
    std::vector<TileGrid> worlds;
    std::vector<FileEntry> files;
};

inline std::string frame_name(std::size_t e, std::size_t t)
{
    return "frames/ep" + std::to_string(e) + "_t" + std::to_string(t) + ".png";
}

inline std::string mask_name(std::size_t e, std::size_t t)
{
    return "masks/ep" + std::to_string(e) + "_t" + std::to_string(t) + ".png";
}

inline std::string tiles_string(const TileGrid& g)
{
    std::string s;
    for (auto t : g.tiles) {
        s.push_back(static_cast<char>('0' + t));
    }
    return s;
}

inline nlohmann::json to_json(const DatasetManifest& m)
{
    nlohmann::json j;
    j["seed"] = m.seed;
    j["episodes"] = m.episodes;
    j["steps_per_episode"] = m.steps_per_episode;
    j["image_height"] = m.image_height;
    j["image_width"] = m.image_width;
    j["transitions"] = m.transitions;
    j["palette_version"] = m.palette_version;
    j["rng"] = m.rng;
    j["terrain_weights"] = m.terrain_weights;
    j["worlds"] = nlohmann::json::array();
    for (std::size_t e = 0; e < m.worlds.size(); ++e) {
        j["worlds"].push_back(
            {{"episode", e}, {"rows", m.worlds[e].rows}, {"cols", m.worlds[e].cols}, {"tiles", tiles_string(m.worlds[e])}});
    }
    j["files"] = nlohmann::json::array();
    for (const auto& f : m.files) {
        j["files"].push_back({{"path", f.path}, {"bytes", f.bytes}, {"crc32", f.crc32}});
    }
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j)
{
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.episodes = j.at("episodes").get<std::size_t>();
    m.steps_per_episode = j.at("steps_per_episode").get<std::size_t>();
    m.image_height = j.at("image_height").get<std::size_t>();
    m.image_width = j.at("image_width").get<std::size_t>();
    m.transitions = j.at("transitions").get<std::size_t>();
    m.palette_version = j.at("palette_version").get<int>();
    m.rng = j.at("rng").get<std::string>();
    m.terrain_weights = j.at("terrain_weights").get<std::array<double, kTerrainTypeCount>>();
    for (const auto& w : j.at("worlds")) {
        TileGrid g(w.at("rows").get<std::size_t>(), w.at("cols").get<std::size_t>());
        const auto tiles = w.at("tiles").get<std::string>();
        if (tiles.size() != g.tiles.size()) {
            throw LoadError("world tile string has the wrong length");
        }
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            g.tiles[i] = static_cast<std::uint8_t>(tiles[i] - '0');
        }
        m.worlds.push_back(std::move(g));
    }
    for (const auto& f : j.at("files")) {
        m.files.push_back({f.at("path").get<std::string>(), f.at("bytes").get<std::uintmax_t>(),
                           f.at("crc32").get<std::string>()});
    }
    return m;
}

/// Writes PNG frames and masks, transitions.jsonl and finally manifest.json.
inline DatasetManifest write_dataset(std::span<const EpisodeLog> episodes, const std::filesystem::path& out_dir,
                                     std::uint64_t seed = 0,
                                     const std::array<double, kTerrainTypeCount>& weights = kDefaultTerrainWeights)
{
    namespace fs = std::filesystem;
    if (episodes.empty()) {
        throw ConfigError("cannot write an empty dataset");
    }
    fs::create_directories(out_dir / "frames");
    fs::create_directories(out_dir / "masks");

    DatasetManifest m;
    m.seed = seed;
    m.episodes = episodes.size();
    m.steps_per_episode = episodes.front().steps();
    m.image_height = episodes.front().observations.front().frame.height;
    m.image_width = episodes.front().observations.front().frame.width;
    m.terrain_weights = weights;

    const auto record = [&](const std::string& rel, std::span<const std::uint8_t> bytes) {
        write_file_bytes(out_dir / rel, bytes);
        m.files.push_back({rel, bytes.size(), crc32_hex(crc32_of(bytes))});
    };

    std::string jsonl;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const auto& ep = episodes[e];
        if (ep.observations.size() != ep.steps() + 1 || ep.steps() == 0) {
            throw ConfigError("episode " + std::to_string(e) + " is malformed");
        }
        m.worlds.push_back(ep.grid);
        for (std::size_t t = 0; t < ep.observations.size(); ++t) {
            record(frame_name(e, t), encode_rgb_png(ep.observations[t].frame));
            record(mask_name(e, t), encode_indexed_png(ep.observations[t].mask, kMaskPalette));
        }
        for (std::size_t t = 0; t < ep.steps(); ++t) {
            const nlohmann::json rec = {{"episode", e},
                                        {"step", t},
                                        {"action", static_cast<int>(ep.actions[t])},
                                        {"frame", frame_name(e, t)},
                                        {"next_frame", frame_name(e, t + 1)},
                                        {"mask", mask_name(e, t)},
                                        {"next_mask", mask_name(e, t + 1)}};
            jsonl += rec.dump() + "\n";
            ++m.transitions;
        }
    }
    record("transitions.jsonl",
           std::span(reinterpret_cast<const std::uint8_t*>(jsonl.data()), jsonl.size()));

    const std::string manifest = to_json(m).dump(2) + "\n";
    write_file_bytes(out_dir / "manifest.json",
                     std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
    return m;
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<EpisodeLog> episodes;
    std::string checksum; // crc32 of manifest.json, which itself lists every file's crc32
};

/// Loads and verifies a dataset directory. Every manifest entry must exist with the recorded
/// length and checksum, and replaying each episode must reproduce the stored frames and masks.
inline Dataset read_dataset(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw LoadError("dataset has no manifest.json: " + dir.string());
    }
    const auto manifest_bytes = read_file_bytes(manifest_path);
    Dataset ds;
    ds.checksum = crc32_hex(crc32_of(manifest_bytes));
    try {
        ds.manifest = manifest_from_json(nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end()));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("manifest.json is malformed: " + std::string(e.what()));
    }
    const auto& m = ds.manifest;
    if (m.episodes == 0 || m.worlds.size() != m.episodes) {
        throw LoadError("manifest.json describes no episodes");
    }
    for (const auto& f : m.files) {
        const fs::path p = dir / f.path;
        std::error_code ec;
        const auto size = fs::file_size(p, ec);
        if (ec) {
            throw LoadError("missing dataset file " + f.path);
        }
        if (size != f.bytes) {
            throw LoadError("dataset file " + f.path + " has " + std::to_string(size) + " bytes, manifest says "
                            + std::to_string(f.bytes));
        }
        if (crc32_hex(crc32_of(read_file_bytes(p))) != f.crc32) {
            throw LoadError("dataset file " + f.path + " fails its checksum");
        }
    }

    std::vector<std::vector<Action>> actions(m.episodes);
    {
        std::ifstream in(dir / "transitions.jsonl");
        std::string line;
        std::size_t count = 0;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const auto rec = nlohmann::json::parse(line, nullptr, false);
            if (rec.is_discarded()) {
                throw LoadError("transitions.jsonl line " + std::to_string(count + 1) + " is not JSON");
            }
            const auto e = rec.at("episode").get<std::size_t>();
            const auto t = rec.at("step").get<std::size_t>();
            const auto a = rec.at("action").get<int>();
            if (e >= m.episodes || t != actions[e].size() || a < 0 || a >= static_cast<int>(kActionCount)) {
                throw LoadError("transitions.jsonl line " + std::to_string(count + 1) + " is out of order or invalid");
            }
            actions[e].push_back(static_cast<Action>(a));
            ++count;
        }
        if (count != m.transitions) {
            throw LoadError("transitions.jsonl has " + std::to_string(count) + " records, manifest says "
                            + std::to_string(m.transitions));
        }
    }

    for (std::size_t e = 0; e < m.episodes; ++e) {
        EpisodeLog ep;
        ep.id = e;
        ep.grid = m.worlds[e];
        try {
            validate(ep.grid);
        } catch (const ConfigError& err) {
            throw LoadError("world of episode " + std::to_string(e) + ": " + err.what());
        }
        ep.actions = actions[e];
        AgentState state{*ep.grid.spawn_position(), {}};
        for (std::size_t t = 0; t <= ep.actions.size(); ++t) {
            if (t > 0) {
                state = apply_action(ep.grid, state, ep.actions[t - 1]);
            }
            Observation obs;
            obs.frame = read_rgb_png(dir / frame_name(e, t));
            obs.mask = read_indexed_png(dir / mask_name(e, t));
            obs.hud = state.hud;
            obs.agent = state.position;
            const Observation expected = render(ep.grid, state.position, state.hud);
            if (!(expected.frame == obs.frame)) {
                throw LoadError("dataset file " + frame_name(e, t) + " does not match the replayed episode");
            }
            if (!(expected.mask == obs.mask)) {
                throw LoadError("dataset file " + mask_name(e, t) + " does not match the replayed episode");
            }
            ep.observations.push_back(std::move(obs));
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

} // namespace vqa::tileworld

#endif
