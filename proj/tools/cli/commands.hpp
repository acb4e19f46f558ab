#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tsae::cli {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;  // accepted for interface stability; execution is single-threaded
    bool resume = false;
    std::string model;        // serve-blackbox only
};

std::vector<std::string> command_names();

/// Runs one subcommand. Returns 0 when every artifact was written and every gate passed,
/// 1 when a gate failed, 2 on errors.
int run_command(const std::string& name, const Options& opts, std::istream& in, std::ostream& out,
                std::ostream& log);

/// Instance positions selected by "split:a..b" (inclusive), "split:i,j,..." or "split:all",
/// where split is train, val, test or all. Positions index into the split's instance list.
struct Selection {
    std::string split;
    std::vector<std::size_t> positions;
};
Selection parse_selector(const std::string& s, std::size_t split_size);

}  // namespace tsae::cli
