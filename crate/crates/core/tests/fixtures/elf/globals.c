int x;
int y[10];
long counter = 5;
const char banner[] = "weave";
static int hidden = 3;
__thread int per_thread;

int bump(int k) {
    hidden += k;
    counter += k;
    per_thread++;
    return x + y[k] + hidden + banner[0];
}
