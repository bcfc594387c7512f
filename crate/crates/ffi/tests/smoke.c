#include <math.h>
#include <stdio.h>
#include "ngmpc.h"

int main(void) {
    NgmpcBound b;
    if (ngmpc_clearance_bound(3.0, 10.0, &b) != NGMPC_STATUS_OK || !b.applicable) return 1;
    if (fabs(b.bound - 4.0 / 81.0) > 1e-15) return 2;

    NgmpcScenario *s = NULL;
    if (ngmpc_scenario_bundled("no_such_scenario", &s) != NGMPC_STATUS_CONFIG || s != NULL) return 3;
    if (ngmpc_last_error() == NULL) return 4;
    if (ngmpc_scenario_bundled("crossing_eps01", &s) != NGMPC_STATUS_OK) return 5;
    size_t n = 0;
    if (ngmpc_scenario_agent_count(s, &n) != NGMPC_STATUS_OK || n != 4) return 6;
    if (ngmpc_scenario_agent_count(NULL, &n) != NGMPC_STATUS_NULL_POINTER) return 7;
    ngmpc_scenario_free(s);
    ngmpc_scenario_free(NULL);
    printf("%s\n", ngmpc_status_name(NGMPC_STATUS_OK));
    return 0;
}
