/* Cycle through the available phases every 30 s and print metrics.
 * Build: see README. */
#include <stdio.h>
#include "tsc.h"

int main(void) {
    TscSim *sim = NULL;
    if (tsc_sim_new(NULL, 0, &sim) != TSC_STATUS_OK) {
        fprintf(stderr, "sim: %s\n", tsc_last_error());
        return 1;
    }
    uint32_t phases[16];
    size_t n = 0;
    for (int t = 0; t < 3600; t++) {
        if (tsc_sim_available(sim, phases, 16, &n) != TSC_STATUS_OK) return 1;
        uint32_t target = phases[(t / 30) % n];
        tsc_sim_request_phase(sim, target, NULL);
        tsc_sim_step(sim);
    }
    TscMetrics m;
    tsc_sim_metrics(sim, &m);
    printf("tsc %s: awt %.2f s over %llu vehicles\n", tsc_version(), m.awt, (unsigned long long)m.completed);
    if (tsc_sim_request_phase(sim, 99, NULL) != TSC_STATUS_OK) printf("error: %s\n", tsc_last_error());
    tsc_sim_free(sim);
    return 0;
}
