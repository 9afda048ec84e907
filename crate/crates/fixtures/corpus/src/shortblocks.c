#include <stdio.h>
#include <stdlib.h>

struct ops {
    long pad[11];
    long (*fn)(long);
};

__attribute__((noinline)) long twice(long v) { return v * 2; }
__attribute__((noinline)) long inc(long v) { return v + 1; }

__attribute__((noinline)) int tiny(int a, int b) {
    if (a)
        b++;
    if (b & 2)
        a--;
    if (a > b)
        return a;
    return b;
}

__attribute__((noinline)) long apply(const struct ops *o, long v, int n) {
    while (n-- > 0) {
        if (v & 1)
            v = o->fn(v);
        else
            v = inc(v);
    }
    return v;
}

__attribute__((noinline)) int bits(unsigned x) {
    int r = 0;
    if (x & 1)
        r++;
    if (x & 2)
        r += 2;
    if (x & 4)
        r ^= 5;
    if (x & 8)
        r--;
    return r;
}

int main(int argc, char **argv) {
    int n = argc > 1 ? atoi(argv[1]) : 9;
    struct ops o = {{0}, twice};
    long acc = 0;
    for (int i = 0; i < n; i++)
        acc += tiny(i & 1, i) + bits((unsigned)i);
    printf("%ld %ld\n", acc, apply(&o, n, n));
    return 0;
}
