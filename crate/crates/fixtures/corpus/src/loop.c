#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) int collatz(unsigned long n) {
    int steps = 0;
    while (n != 1) {
        n = (n & 1) ? 3 * n + 1 : n / 2;
        steps++;
    }
    return steps;
}

__attribute__((noinline)) int is_prime(int n) {
    if (n < 2)
        return 0;
    for (int d = 2; d * d <= n; d++)
        if (n % d == 0)
            return 0;
    return 1;
}

int main(int argc, char **argv) {
    int lim = argc > 1 ? atoi(argv[1]) : 20;
    int primes = 0, best = 0;
    for (int i = 1; i <= lim; i++) {
        primes += is_prime(i);
        int c = collatz(i);
        if (c > best)
            best = c;
    }
    printf("primes=%d best=%d\n", primes, best);
    return 0;
}
