#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crane/errors.hpp"
#include "crane/evaluation.hpp"
#include "crane/util.hpp"

namespace crane {

// verify-metric: recompute LangSpec-F1 from published original/masked score
// rows and compare against the published metric column.
//
// Fixture CSV columns:
//   method,mask_lang,language,original,masked,expected_f1,check
// expected_f1 and check appear on the target row (language == mask_lang).
// check is "strict" (gates the exit code) or "note" (reported only; used for
// rows whose published metric is not a function of the row's own published
// scores, e.g. values averaged over re-draws upstream).
struct VerifyRow {
    std::string method;
    std::string mask_lang;
    double expected = 0.0;
    double recomputed = 0.0;
    bool strict = true;
    bool pass = false;
};

inline std::vector<VerifyRow> verify_metric_text(const std::string& text, const std::string& what,
                                                 double tolerance = 0.002, double epsilon = 1e-9) {
    struct Group {
        ScoreTable table;
        double expected = 0.0;
        bool has_expected = false;
        bool strict = true;
    };
    std::vector<std::pair<std::pair<std::string, std::string>, Group>> groups;  // file order
    auto group_of = [&](const std::string& method, const std::string& mask) -> Group& {
        for (auto& [key, g] : groups)
            if (key.first == method && key.second == mask) return g;
        groups.push_back({{method, mask}, {}});
        return groups.back().second;
    };

    std::size_t line_no = 0;
    std::size_t start = 0;
    bool header_seen = false;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = trim(std::string_view(text).substr(start, end - start));
        ++line_no;
        start = end + 1;
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line != "method,mask_lang,language,original,masked,expected_f1,check")
                throw FormatError(what + ":" + std::to_string(line_no) + ": unexpected header");
            header_seen = true;
            continue;
        }
        auto fields = split(line, ',');
        if (fields.size() != 7)
            throw FormatError(what + ":" + std::to_string(line_no) + ": expected 7 fields, got " +
                              std::to_string(fields.size()));
        std::string at = what + ":" + std::to_string(line_no);
        std::string method = trim(fields[0]);
        std::string mask = trim(fields[1]);
        std::string language = trim(fields[2]);
        if (method.empty() || mask.empty() || language.empty())
            throw FormatError(at + ": empty identifier field");
        Group& g = group_of(method, mask);
        g.table.rows.push_back({language, {parse_double(trim(fields[3]), at),
                                           parse_double(trim(fields[4]), at)}});
        std::string expected = trim(fields[5]);
        if (!expected.empty()) {
            if (language != mask)
                throw FormatError(at + ": expected_f1 must sit on the target-language row");
            if (g.has_expected) throw FormatError(at + ": duplicate expected_f1 in group");
            g.expected = parse_double(expected, at);
            g.has_expected = true;
            std::string check = trim(fields[6]);
            if (check == "strict" || check.empty())
                g.strict = true;
            else if (check == "note")
                g.strict = false;
            else
                throw FormatError(at + ": unknown check mode '" + check + "'");
        }
    }
    if (!header_seen) throw FormatError(what + ": empty fixture");

    std::vector<VerifyRow> out;
    for (auto& [key, g] : groups) {
        if (!g.has_expected)
            throw FormatError(what + ": group " + key.first + "/" + key.second +
                              " carries no expected_f1");
        VerifyRow row;
        row.method = key.first;
        row.mask_lang = key.second;
        row.expected = g.expected;
        row.recomputed = langspec_f1(g.table, key.second, epsilon).f1;
        row.strict = g.strict;
        row.pass = std::abs(row.recomputed - row.expected) <= tolerance;
        out.push_back(row);
    }
    return out;
}

inline std::vector<VerifyRow> verify_metric_file(const std::filesystem::path& path,
                                                 double tolerance = 0.002, double epsilon = 1e-9) {
    return verify_metric_text(read_file(path), path.filename().string(), tolerance, epsilon);
}

}  // namespace crane
