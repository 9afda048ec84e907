#include <stdio.h>

__attribute__((noinline)) unsigned long step(unsigned long acc, unsigned char c, unsigned long x) {
    switch ((unsigned char)(c - 32)) {
    case 0:
        acc += 3;
        break;
    case 1:
        acc ^= 4;
        break;
    case 2:
        acc *= 5;
        break;
    case 3:
        acc -= 6 * x;
        break;
    case 4:
        acc = (acc << 5) | 7;
        break;
    case 5:
        acc = acc / 8 + x;
        break;
    case 6:
        acc |= 9 << 2;
        break;
    case 7:
        acc = acc % 10 + 10;
        break;
    case 8:
        acc += 11;
        break;
    case 9:
        acc ^= 12;
        break;
    case 10:
        acc *= 13;
        break;
    case 11:
        acc -= 14 * x;
        break;
    case 12:
        acc = (acc << 3) | 15;
        break;
    case 13:
        acc = acc / 16 + x;
        break;
    case 14:
        acc |= 17 << 5;
        break;
    case 15:
        acc = acc % 18 + 18;
        break;
    case 16:
        acc += 19;
        break;
    case 17:
        acc ^= 20;
        break;
    case 18:
        acc *= 21;
        break;
    case 19:
        acc -= 22 * x;
        break;
    case 20:
        acc = (acc << 1) | 23;
        break;
    case 21:
        acc = acc / 24 + x;
        break;
    case 22:
        acc |= 25 << 3;
        break;
    case 23:
        acc = acc % 26 + 26;
        break;
    case 24:
        acc += 27;
        break;
    case 25:
        acc ^= 28;
        break;
    case 26:
        acc *= 29;
        break;
    case 27:
        acc -= 30 * x;
        break;
    case 28:
        acc = (acc << 4) | 31;
        break;
    case 29:
        acc = acc / 32 + x;
        break;
    case 30:
        acc |= 33 << 1;
        break;
    case 31:
        acc = acc % 34 + 34;
        break;
    case 32:
        acc += 35;
        break;
    case 33:
        acc ^= 36;
        break;
    case 34:
        acc *= 37;
        break;
    case 35:
        acc -= 38 * x;
        break;
    case 36:
        acc = (acc << 2) | 39;
        break;
    case 37:
        acc = acc / 40 + x;
        break;
    case 38:
        acc |= 41 << 4;
        break;
    case 39:
        acc = acc % 42 + 42;
        break;
    case 40:
        acc += 43;
        break;
    case 41:
        acc ^= 44;
        break;
    case 42:
        acc *= 45;
        break;
    case 43:
        acc -= 46 * x;
        break;
    case 44:
        acc = (acc << 5) | 47;
        break;
    case 45:
        acc = acc / 48 + x;
        break;
    case 46:
        acc |= 49 << 2;
        break;
    case 47:
        acc = acc % 50 + 50;
        break;
    case 48:
        acc += 51;
        break;
    case 49:
        acc ^= 52;
        break;
    case 50:
        acc *= 53;
        break;
    case 51:
        acc -= 54 * x;
        break;
    case 52:
        acc = (acc << 3) | 55;
        break;
    case 53:
        acc = acc / 56 + x;
        break;
    case 54:
        acc |= 57 << 5;
        break;
    case 55:
        acc = acc % 58 + 58;
        break;
    case 56:
        acc += 59;
        break;
    case 57:
        acc ^= 60;
        break;
    case 58:
        acc *= 61;
        break;
    case 59:
        acc -= 62 * x;
        break;
    case 60:
        acc = (acc << 1) | 63;
        break;
    case 61:
        acc = acc / 64 + x;
        break;
    case 62:
        acc |= 65 << 3;
        break;
    case 63:
        acc = acc % 66 + 66;
        break;
    case 64:
        acc += 67;
        break;
    case 65:
        acc ^= 68;
        break;
    case 66:
        acc *= 69;
        break;
    case 67:
        acc -= 70 * x;
        break;
    case 68:
        acc = (acc << 4) | 71;
        break;
    case 69:
        acc = acc / 72 + x;
        break;
    case 70:
        acc |= 73 << 1;
        break;
    case 71:
        acc = acc % 74 + 74;
        break;
    case 72:
        acc += 75;
        break;
    case 73:
        acc ^= 76;
        break;
    case 74:
        acc *= 77;
        break;
    case 75:
        acc -= 78 * x;
        break;
    case 76:
        acc = (acc << 2) | 79;
        break;
    case 77:
        acc = acc / 80 + x;
        break;
    case 78:
        acc |= 81 << 4;
        break;
    case 79:
        acc = acc % 82 + 82;
        break;
    case 80:
        acc += 83;
        break;
    case 81:
        acc ^= 84;
        break;
    case 82:
        acc *= 85;
        break;
    case 83:
        acc -= 86 * x;
        break;
    case 84:
        acc = (acc << 5) | 87;
        break;
    case 85:
        acc = acc / 88 + x;
        break;
    case 86:
        acc |= 89 << 2;
        break;
    case 87:
        acc = acc % 90 + 90;
        break;
    case 88:
        acc += 91;
        break;
    case 89:
        acc ^= 92;
        break;
    case 90:
        acc *= 93;
        break;
    case 91:
        acc -= 94 * x;
        break;
    default:
        acc = ~acc;
        break;
    }
    return acc;
}

int main(int argc, char **argv) {
    const char *s = argc > 1 ? argv[1] : "Hello, World!";
    unsigned long acc = 1;
    for (unsigned long i = 0; s[i]; i++)
        acc = step(acc, (unsigned char)s[i], i);
    printf("%lu\n", acc);
    return 0;
}
