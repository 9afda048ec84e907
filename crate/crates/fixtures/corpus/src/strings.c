#include <ctype.h>
#include <stdio.h>
#include <string.h>

__attribute__((noinline)) void reverse(char *s) {
    size_t n = strlen(s);
    for (size_t i = 0; i < n / 2; i++) {
        char t = s[i];
        s[i] = s[n - 1 - i];
        s[n - 1 - i] = t;
    }
}

__attribute__((noinline)) int vowels(const char *s) {
    int n = 0;
    for (; *s; s++)
        if (strchr("aeiouAEIOU", *s))
            n++;
    return n;
}

__attribute__((noinline)) void shout(char *s) {
    for (; *s; s++)
        *s = (char)toupper((unsigned char)*s);
}

int main(int argc, char **argv) {
    char buf[256];
    for (int i = 1; i < argc; i++) {
        strncpy(buf, argv[i], sizeof buf - 1);
        buf[sizeof buf - 1] = 0;
        int v = vowels(buf);
        reverse(buf);
        if (v > 2)
            shout(buf);
        printf("%s %d\n", buf, v);
    }
    return 0;
}
