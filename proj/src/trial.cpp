#include "vconf/trial.hpp"

#include "vconf/error.hpp"

namespace vconf {

const char * to_string(role r) {
    switch (r) {
    case role::panl:       return "PANL";
    case role::panl_plus1: return "PANL_PLUS1";
    case role::cc:         return "CC";
    case role::fcc:        return "FCC";
    case role::last_a:     return "LAST_A";
    case role::first_a:    return "FIRST_A";
    }
    return "?";
}

role parse_role(std::string_view name) {
    if (name == "PANL") return role::panl;
    if (name == "PANL_PLUS1" || name == "PANL+1") return role::panl_plus1;
    if (name == "CC") return role::cc;
    if (name == "FCC") return role::fcc;
    if (name == "LAST_A" || name == "last_A") return role::last_a;
    if (name == "FIRST_A") return role::first_a;
    throw error(error_kind::config, "unknown role \"" + std::string(name) + "\"");
}

std::size_t position_map::at(role r) const {
    switch (r) {
    case role::panl:       return panl;
    case role::panl_plus1: return panl_plus1;
    case role::cc:         return cc;
    case role::last_a:     return last_a;
    case role::first_a:    return first_a;
    case role::fcc:
        if (!fcc) throw error(error_kind::template_error, "template has no FCC position");
        return *fcc;
    }
    throw error(error_kind::validation, "bad role");
}

} // namespace vconf
