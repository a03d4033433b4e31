#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace maskfuse {

// Flat key=value run configuration. Keys carry a section prefix
// ("model.d_model"); a "[model]" line prefixes the keys that follow it.
// Every key has a default and unknown keys are rejected.
class RunConfig {
public:
    RunConfig();

    static const std::map<std::string, std::string> & defaults();

    void set(const std::string & key, const std::string & value);
    bool has(const std::string & key) const;

    void parse(std::istream & in, const std::string & source = "<input>");
    void load_file(const std::filesystem::path & path);

    const std::string & str(const std::string & key) const;
    long long integer(const std::string & key) const;
    std::uint64_t u64(const std::string & key) const;
    double number(const std::string & key) const;
    bool flag(const std::string & key) const;
    std::vector<double> numbers(const std::string & key) const;

    // Every key, defaults expanded, sorted.
    std::string resolved_text() const;
    void write_resolved(const std::filesystem::path & path) const;
    // FNV-1a of resolved_text(), as 16 hex digits.
    std::string hash() const;

    const std::map<std::string, std::string> & values() const noexcept { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace maskfuse
