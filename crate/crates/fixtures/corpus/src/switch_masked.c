#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) unsigned mix(unsigned v, unsigned sel) {
    switch (sel & 0xf) {
    case 0:
        v += 11;
        break;
    case 1:
        v ^= 0x55;
        break;
    case 2:
        v *= 3;
        break;
    case 3:
        v -= 7;
        break;
    case 4:
        v <<= 2;
        break;
    case 5:
        v >>= 1;
        break;
    case 6:
        v |= 0x100;
        break;
    case 7:
        v &= 0xff0;
        break;
    case 8:
        v += v >> 3;
        break;
    case 9:
        v ^= v << 1;
        break;
    case 10:
        v = v * 5 + 1;
        break;
    case 11:
        v = ~v;
        break;
    case 12:
        v -= v >> 2;
        break;
    case 13:
        v += 0x1234;
        break;
    case 14:
        v ^= 0xf0f0;
        break;
    case 15:
        v = v / 3 + 9;
        break;
    }
    return v;
}

int main(int argc, char **argv) {
    unsigned seed = argc > 1 ? (unsigned)atoi(argv[1]) : 7;
    unsigned v = seed;
    for (unsigned i = 0; i < 40; i++)
        v = mix(v, seed * i + (v >> 5));
    printf("%u\n", v);
    return 0;
}
