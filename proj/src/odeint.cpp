#include "sysid/odeint.hpp"

namespace sysid::ode {

const char* to_string(Method m) {
    switch (m) {
        case Method::euler: return "euler";
        case Method::rk4: return "rk4";
        case Method::dopri5: return "dopri5";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "euler") return Method::euler;
    if (s == "rk4") return Method::rk4;
    if (s == "dopri5") return Method::dopri5;
    throw ParameterError("unknown solver method '" + s + "'");
}

}  // namespace sysid::ode
